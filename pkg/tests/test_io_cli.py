import numpy as np
import pytest

from subguide.basis import BasisEntry, SemanticBasis
from subguide.cli import main
from subguide.errors import (
    BadMagicError, HashMismatchError, TruncatedFileError, VersionMismatchError,
)
from subguide.io import (
    load_basis, load_checkpoint, load_latent, read_manifest, read_pgm,
    save_basis, save_checkpoint, save_latent, write_manifest, write_pgm,
)
from subguide.model import ConceptPrompt, DenoiserModel, eval_denoiser
from subguide.serialize import model_fingerprint
from subguide.tensor import Tensor


# ---------------------------------------------------------------------------
# PGM

def test_pgm_round_trip_and_quantization(tmp_path):
    img = np.array([[0.0, 1.0], [0.5, 0.25]])
    p = tmp_path / "x.pgm"
    write_pgm(p, img)
    back = read_pgm(p).data[0]
    # round-half-up: 0.5*255+0.5 -> 128
    assert back[1, 0] == pytest.approx(128 / 255)
    assert back[0, 0] == 0.0 and back[0, 1] == 1.0
    write_pgm(p, back)
    assert np.array_equal(read_pgm(p).data[0], back)  # quantization idempotent


def test_pgm_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P2\n2 2\n255\n....")
    with pytest.raises(BadMagicError):
        read_pgm(p)


def test_pgm_rejects_truncation(tmp_path):
    p = tmp_path / "short.pgm"
    p.write_bytes(b"P5\n4 4\n255\nab")
    with pytest.raises(TruncatedFileError):
        read_pgm(p)


# ---------------------------------------------------------------------------
# checkpoint + basis containers

def test_checkpoint_round_trip_byte_identical(tmp_path, micro_model):
    p1, p2 = tmp_path / "a.fckp", tmp_path / "b.fckp"
    save_checkpoint(p1, micro_model)
    loaded, h = load_checkpoint(p1)
    save_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert h == model_fingerprint(micro_model)
    # identical eps on a probe batch
    x = Tensor(np.random.default_rng(0).standard_normal((2, 1, 8, 8)))
    a, _ = eval_denoiser(micro_model, x, 5, ConceptPrompt(0, 1))
    b, _ = eval_denoiser(loaded, x, 5, ConceptPrompt(0, 1))
    assert np.array_equal(a.data, b.data)


def test_checkpoint_corruption_errors(tmp_path, micro_model):
    p = tmp_path / "m.fckp"
    save_checkpoint(p, micro_model)
    raw = bytearray(p.read_bytes())
    # flip one payload byte -> hash mismatch
    bad = bytearray(raw)
    bad[-1] ^= 0xFF
    p.write_bytes(bytes(bad))
    with pytest.raises(HashMismatchError):
        load_checkpoint(p)
    # wrong magic
    bad = bytearray(raw)
    bad[0] = ord(b"X")
    p.write_bytes(bytes(bad))
    with pytest.raises(BadMagicError):
        load_checkpoint(p)
    # wrong version
    bad = bytearray(raw)
    bad[4] = 99
    p.write_bytes(bytes(bad))
    with pytest.raises(VersionMismatchError):
        load_checkpoint(p)
    # truncated
    p.write_bytes(bytes(raw[: len(raw) // 2]))
    with pytest.raises(TruncatedFileError):
        load_checkpoint(p)
    codes = {HashMismatchError.code, BadMagicError.code,
             VersionMismatchError.code, TruncatedFileError.code}
    assert len(codes) == 4  # distinct error codes


def _toy_basis():
    rng = np.random.default_rng(0)
    entries = {}
    for t in (9, 3):
        comp = np.linalg.qr(rng.standard_normal((4, 4)))[0][:2]
        entries[t] = BasisEntry(mu=rng.standard_normal(4), components=comp,
                                eigenvalues=np.array([2.0, 1.0]))
    return SemanticBasis(concept_key="circle", model_hash=bytes(range(32)),
                         feature_site="keys", n_seeds=3, n_basis=2, entries=entries)


def test_basis_round_trip_byte_identical(tmp_path):
    basis = _toy_basis()
    p1, p2 = tmp_path / "a.fcbs", tmp_path / "b.fcbs"
    save_basis(p1, basis)
    loaded = load_basis(p1)
    save_basis(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()
    assert loaded.concept_key == "circle"
    assert loaded.model_hash == bytes(range(32))
    assert loaded.feature_site == "keys"
    for t in (9, 3):
        assert np.array_equal(loaded.entries[t].components, basis.entries[t].components)


def test_basis_corruption_rejected(tmp_path):
    p = tmp_path / "b.fcbs"
    save_basis(p, _toy_basis())
    raw = bytearray(p.read_bytes())
    raw[80] ^= 0x01
    p.write_bytes(bytes(raw))
    with pytest.raises(HashMismatchError):
        load_basis(p)


def test_latent_round_trip(tmp_path):
    z = np.random.default_rng(1).standard_normal((1, 1, 8, 8))
    p = tmp_path / "z.fclt"
    save_latent(p, z)
    assert np.array_equal(load_latent(p), z)


def test_manifest_round_trip(tmp_path):
    p = tmp_path / "manifest.txt"
    write_manifest(p, {"seed": 7, "lambda_s": 600.0, "name": "run a"})
    back = read_manifest(p)
    assert back == {"seed": "7", "lambda_s": "600.0", "name": "run a"}


# ---------------------------------------------------------------------------
# CLI end to end on a micro stack

@pytest.fixture(scope="module")
def cli_stack(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    ckpt = root / "model.fckp"
    basis = root / "circle.fcbs"
    assert main(["gen-data", "--out", str(data), "--n", "16", "--seed", "3",
                 "--size", "8"]) == 0
    assert main(["train", "--data", str(data), "--out", str(ckpt), "--epochs", "2",
                 "--batch-size", "8", "--T", "50", "--seed", "1"]) == 0
    assert main(["analyze", "--ckpt", str(ckpt), "--concept", "circle", "--out",
                 str(basis), "--n-seeds", "2", "--n-basis", "4",
                 "--invert-steps", "50", "--sample-steps", "6", "--T", "50"]) == 0
    return root, data, ckpt, basis


def test_cli_gen_data_outputs(cli_stack):
    root, data, _, _ = cli_stack
    rows = (data / "dataset.tsv").read_text().splitlines()
    assert len(rows) == 16
    rel, concept, style = rows[0].split("\t")
    assert (data / rel).exists()
    assert concept == "circle"
    assert (data / "manifest.txt").exists()


def test_cli_analyze_manifest_and_reuse(cli_stack, capsys):
    root, data, ckpt, basis = cli_stack
    man = read_manifest(str(basis) + ".manifest.txt")
    assert man["n_seeds"] == "2" and man["n_basis"] == "4"
    assert man["reused_existing_basis"] == "False"
    # second run with the same concept/checkpoint skips recomputation
    assert main(["analyze", "--ckpt", str(ckpt), "--concept", "circle", "--out",
                 str(basis), "--n-seeds", "2", "--n-basis", "4",
                 "--invert-steps", "50", "--sample-steps", "6", "--T", "50"]) == 0
    man = read_manifest(str(basis) + ".manifest.txt")
    assert man["reused_existing_basis"] == "True"


def test_cli_synthesize_outputs_and_lambda_a_default(cli_stack):
    root, data, ckpt, basis = cli_stack
    cond = root / "cond.pgm"
    from subguide.shapes import ShapeSpec, derive_condition

    spec = ShapeSpec("circle", "solid", 0.9, (0.5, 0.5), 0.3, 0.0, 0.1)
    write_pgm(cond, derive_condition(spec, "edge", size=8).pixels)
    out = root / "synth"
    code = main(["synthesize", "--ckpt", str(ckpt), "--basis", str(basis),
                 "--cond", str(cond), "--concept", "circle", "--style", "speckle",
                 "--lambda-s", "600", "--fraction", "0.0", "--steps", "6",
                 "--invert-steps", "50", "--T", "50", "--seed", "7",
                 "--mask-mode", "ones", "--out", str(out)])
    assert code == 0
    for name in ("image.pgm", "sibling.pgm", "diag.tsv", "manifest.txt"):
        assert (out / name).exists()
    man = read_manifest(out / "manifest.txt")
    assert float(man["lambda_a"]) == pytest.approx(120.0)  # 0.2 * lambda_s
    assert man["seed"] == "7"
    assert "model_hash" in man and len(man["model_hash"]) == 64


def test_cli_synthesize_guided_small_lambda(cli_stack):
    root, data, ckpt, basis = cli_stack
    cond = root / "cond2.pgm"
    from subguide.shapes import ShapeSpec, derive_condition

    spec = ShapeSpec("circle", "solid", 0.9, (0.5, 0.5), 0.28, 0.0, 0.1)
    write_pgm(cond, derive_condition(spec, "silhouette", size=8).pixels)
    out = root / "synth2"
    code = main(["synthesize", "--ckpt", str(ckpt), "--basis", str(basis),
                 "--cond", str(cond), "--concept", "circle",
                 "--lambda-s", "3", "--fraction", "0.5", "--steps", "6",
                 "--invert-steps", "50", "--T", "50", "--seed", "2",
                 "--mask-mode", "ones", "--out", str(out)])
    assert code == 0
    diag = (out / "diag.tsv").read_text().splitlines()
    assert len(diag) == 3  # guided prefix of a 6-step plan at fraction 0.5
    step, t, g_s, g_a = diag[0].split("\t")
    assert float(g_s) >= 0.0 and float(g_a) >= 0.0


def test_cli_rerun_from_manifest_reproduces_bitwise(cli_stack):
    root, data, ckpt, basis = cli_stack
    out1 = root / "synth2"
    out2 = root / "synth3"
    code = main(["synthesize", "--config", str(out1 / "manifest.txt"),
                 "--out", str(out2)])
    assert code == 0
    assert (out1 / "image.pgm").read_bytes() == (out2 / "image.pgm").read_bytes()
    assert (out1 / "sibling.pgm").read_bytes() == (out2 / "sibling.pgm").read_bytes()


def test_cli_wrong_basis_hash_refused(cli_stack, tmp_path):
    root, data, ckpt, basis = cli_stack
    other_ckpt = tmp_path / "other.fckp"
    assert main(["train", "--data", str(root / "data"), "--out", str(other_ckpt),
                 "--epochs", "1", "--batch-size", "8", "--T", "50",
                 "--model-seed", "9"]) == 0
    out = tmp_path / "o"
    code = main(["synthesize", "--ckpt", str(other_ckpt), "--basis", str(basis),
                 "--cond", str(root / "cond.pgm"), "--concept", "circle",
                 "--lambda-s", "1", "--steps", "4", "--invert-steps", "50",
                 "--T", "50", "--mask-mode", "ones", "--out", str(out)])
    assert code == 2


def test_cli_invert_and_evaluate(cli_stack):
    root, data, ckpt, basis = cli_stack
    latent = root / "z.fclt"
    img = data / "images" / "00000.pgm"
    assert main(["invert", "--ckpt", str(ckpt), "--image", str(img), "--out",
                 str(latent), "--steps", "10", "--T", "50", "--concept",
                 "circle"]) == 0
    assert load_latent(latent).shape == (1, 1, 8, 8)
    code = main(["evaluate", "--ckpt", str(ckpt), "--image", str(img),
                 "--image-b", str(img), "--basis", str(basis), "--T", "50",
                 "--spec-concept", "circle", "--spec-scale", "0.3"])
    assert code == 0


def test_cli_usage_errors():
    assert main(["synthesize", "--nonsense"]) == 1
    assert main(["gen-data"]) == 1  # missing required --out
    assert main(["evaluate", "--ckpt", "/nonexistent.fckp",
                 "--image", "/nonexistent.pgm"]) == 2


def test_cli_ablate_smoke(cli_stack):
    root, data, ckpt, basis = cli_stack
    out = root / "ablate"
    code = main(["ablate", "--ckpt", str(ckpt), "--out", str(out), "--sweep",
                 "guidance", "--probe-n", "1", "--steps", "4",
                 "--invert-steps", "50", "--n-seeds", "2", "--n-basis", "4",
                 "--lambda-s", "2", "--T", "50", "--seed", "0"])
    assert code == 0
    rows = (out / "ablate_guidance.tsv").read_text().splitlines()
    assert rows[0].startswith("sweep\t")
    assert len(rows) == 3  # on + off
