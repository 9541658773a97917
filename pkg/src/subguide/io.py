"""Bit-exact persistence: PGM images, checkpoint and basis files, run
manifests. All integers little-endian; hashes are SHA-256 over the payload
that follows them, so any flipped payload byte is rejected on load."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .basis import BasisEntry, SemanticBasis
from .errors import (
    BadMagicError, ContractViolation, HashMismatchError, TruncatedFileError,
    VersionMismatchError,
)
from .model import DenoiserModel, ModelConfig
from .serialize import (
    _Reader, digest, model_fingerprint, pack_model_config, pack_tensor_table,
    unpack_model_config, unpack_tensor_table,
)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"FCKP"
BASIS_MAGIC = b"FCBS"
LATENT_MAGIC = b"FCLT"
FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# PGM (P5, maxval 255); [0,1] <-> [0,255] with round-half-up

def write_pgm(path, img: Tensor | np.ndarray) -> None:
    arr = img.data if isinstance(img, Tensor) else np.asarray(img)
    if arr.ndim == 3:
        if arr.shape[0] != 1:
            raise ContractViolation("write_pgm expects a single-channel image")
        arr = arr[0]
    if arr.ndim != 2:
        raise ContractViolation(f"write_pgm expects HxW or 1xHxW, got {arr.shape}")
    q = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    h, w = q.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes(order="C"))


def read_pgm(path) -> Tensor:
    raw = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError("PGM header ended early")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise BadMagicError(f"not a binary PGM: {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise VersionMismatchError(f"unsupported PGM maxval {maxval}")
    pos += 1  # single whitespace after maxval
    data = raw[pos:pos + w * h]
    if len(data) < w * h:
        raise TruncatedFileError("PGM pixel payload truncated")
    img = np.frombuffer(data, dtype=np.uint8).reshape(h, w) / 255.0
    return Tensor(img[None, :, :])


# ---------------------------------------------------------------------------
# common framed container: magic | version u32 | payload_len u64 | sha256 | payload

def _frame(magic: bytes, payload: bytes) -> bytes:
    return (magic + struct.pack("<IQ", FORMAT_VERSION, len(payload))
            + digest(payload) + payload)


def _unframe(buf: bytes, magic: bytes) -> bytes:
    if len(buf) < 4:
        raise TruncatedFileError("file shorter than its magic")
    if buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {buf[:4]!r}")
    if len(buf) < 48:
        raise TruncatedFileError("file header truncated")
    version, length = struct.unpack("<IQ", buf[4:16])
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    if len(buf) < 48 + length:
        raise TruncatedFileError(f"payload truncated: {len(buf) - 48} of {length} bytes")
    stored = buf[16:48]
    payload = buf[48:48 + length]
    if digest(payload) != stored:
        raise HashMismatchError("payload digest does not match stored hash")
    return payload


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, model: DenoiserModel) -> bytes:
    """Write the model; returns its 32-byte hash (digest of config+params)."""
    cfg_blob = pack_model_config(model.config)
    table = pack_tensor_table({k: t.data for k, t in model.params.items()})
    payload = cfg_blob + table
    Path(path).write_bytes(_frame(CHECKPOINT_MAGIC, payload))
    return digest(payload)


def load_checkpoint(path) -> tuple[DenoiserModel, bytes]:
    buf = Path(path).read_bytes()
    payload = _unframe(buf, CHECKPOINT_MAGIC)
    cfg, off = unpack_model_config(payload, 0)
    table, _ = unpack_tensor_table(payload, off)
    params = {k: Tensor(v, requires_grad=True) for k, v in table.items()}
    model = DenoiserModel(cfg, params)
    return model, digest(payload)


# ---------------------------------------------------------------------------
# bases

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_basis(path, basis: SemanticBasis) -> bytes:
    parts = [
        _pack_str(basis.concept_key),
        _pack_str(basis.feature_site),
        basis.model_hash,
        struct.pack("<III", basis.n_seeds, basis.n_basis, len(basis.entries)),
    ]
    for t in sorted(basis.entries):
        e = basis.entries[t]
        parts.append(struct.pack("<I", t))
        parts.append(pack_tensor_table({
            "mu": e.mu, "components": e.components, "eigenvalues": e.eigenvalues,
        }))
    payload = b"".join(parts)
    Path(path).write_bytes(_frame(BASIS_MAGIC, payload))
    return digest(payload)


def load_basis(path) -> SemanticBasis:
    payload = _unframe(Path(path).read_bytes(), BASIS_MAGIC)
    r = _Reader(payload)
    concept_key = r.take(r.u32()).decode("utf-8")
    site = r.take(r.u32()).decode("utf-8")
    mhash = r.take(32)
    n_seeds, n_basis, count = struct.unpack("<III", r.take(12))
    basis = SemanticBasis(concept_key=concept_key, model_hash=mhash,
                          feature_site=site, n_seeds=n_seeds, n_basis=n_basis)
    for _ in range(count):
        t = r.u32()
        table, off = unpack_tensor_table(payload, r.off)
        r.off = off
        basis.entries[t] = BasisEntry(mu=table["mu"], components=table["components"],
                                      eigenvalues=table["eigenvalues"])
    return basis


def load_basis_if_matching(path, concept_key: str, model: DenoiserModel) -> Optional[SemanticBasis]:
    """Reuse a stored basis when concept and checkpoint both match."""
    p = Path(path)
    if not p.exists():
        return None
    basis = load_basis(p)
    if basis.concept_key == concept_key and basis.model_hash == model_fingerprint(model):
        return basis
    return None


# ---------------------------------------------------------------------------
# latents (inverted noise images)

def save_latent(path, latent: np.ndarray) -> None:
    payload = pack_tensor_table({"latent": np.asarray(latent, dtype=np.float64)})
    Path(path).write_bytes(_frame(LATENT_MAGIC, payload))


def load_latent(path) -> np.ndarray:
    payload = _unframe(Path(path).read_bytes(), LATENT_MAGIC)
    table, _ = unpack_tensor_table(payload, 0)
    return table["latent"]


# ---------------------------------------------------------------------------
# manifests: line-oriented key=value, doubling as re-runnable config files

def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={entries[k]}" for k in sorted(entries)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out: dict[str, str] = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ContractViolation(f"manifest line without '=': {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out
