"""Command-line surface: gen-data, train, analyze, invert, synthesize,
evaluate, ablate. Exit codes: 0 success, 1 usage error, 2 runtime failure.

Every run writes a manifest (config echo, rng seeds, file hashes) beside its
outputs; manifests are plain key=value text and can be fed back via --config.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .basis import build_basis, default_basis_timesteps
from .ddim import run, uniform_plan
from .errors import SubguideError
from .guidance import (
    GuidanceConfig, guided_sample, prepare_target, write_diagnostics,
)
from .io import (
    load_basis, load_basis_if_matching, load_checkpoint, read_manifest,
    read_pgm, save_basis, save_checkpoint, save_latent, write_manifest,
    write_pgm,
)
from .metrics import (
    EvalReport, appearance_dist, concept_accuracy, default_probe_t,
    report_table, self_similarity_dist, structure_overlap, train_concept_probe,
)
from .model import ConceptPrompt, DenoiserModel, ModelConfig
from .schedule import make_schedule
from .serialize import model_fingerprint
from .shapes import (
    CONCEPTS, MODALITIES, STYLES, derive_condition, render, sample_dataset,
    sample_specs, silhouette_mask,
)
from .tensor import Tensor
from .training import TrainConfig, train

log = logging.getLogger("subguide")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n\n{self.format_help()}")


def _concept_id(name: str) -> int:
    if name not in CONCEPTS:
        raise UsageError(f"unknown concept {name!r}; one of {CONCEPTS}")
    return CONCEPTS.index(name)


def _style_id(name):
    if name is None:
        return None
    if name not in STYLES:
        raise UsageError(f"unknown style {name!r}; one of {STYLES}")
    return STYLES.index(name)


def _apply_config_file(args, argv):
    """Fill flags from a key=value config file; explicit CLI flags win."""
    if not getattr(args, "config", None):
        return args
    stored = read_manifest(args.config)
    sp = args._sp
    argv = list(argv)
    explicit = {a.dest for a in sp._actions
                if any(opt in argv for opt in a.option_strings)}
    for action in sp._actions:
        dest = action.dest
        if dest in ("config", "func", "_sp", "help") or dest in explicit:
            continue
        if dest not in stored or stored[dest] == "None":
            continue
        raw = stored[dest]
        if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            setattr(args, dest, raw.lower() in ("1", "true", "yes"))
        elif isinstance(action, argparse._AppendAction):
            setattr(args, dest, raw.split(","))
        elif action.type is int:
            setattr(args, dest, int(raw))
        elif action.type is float:
            setattr(args, dest, float(raw))
        else:
            setattr(args, dest, raw)
    return args


def _manifest_dict(args, skip=("config", "func", "_sp", "_required")):
    out = {}
    for k, v in sorted(vars(args).items()):
        if k in skip:
            continue
        out[k] = v if not isinstance(v, list) else ",".join(map(str, v))
    out["version"] = __version__
    return out


# ---------------------------------------------------------------------------
# gen-data

def cmd_gen_data(args) -> int:
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    data = sample_dataset(args.n, rng_seed=args.seed, size=args.size)
    specs = sample_specs(args.n, rng_seed=args.seed)
    rows = []
    for i, ((img, prompt), spec) in enumerate(zip(data, specs)):
        rel = f"images/{i:05d}.pgm"
        write_pgm(out / rel, img)
        rows.append(f"{rel}\t{spec.concept}\t{spec.style}")
    (out / "dataset.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.txt", _manifest_dict(args))
    print(f"wrote {args.n} images under {out}")
    return 0


def _load_dataset(data_dir: Path):
    manifest = data_dir / "dataset.tsv"
    if not manifest.exists():
        raise UsageError(f"no dataset.tsv under {data_dir}")
    dataset = []
    for line in manifest.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rel, concept, style = line.split("\t")
        img = read_pgm(data_dir / rel)
        dataset.append((img, ConceptPrompt(_concept_id(concept), _style_id(style))))
    return dataset


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    dataset = _load_dataset(Path(args.data))
    size = dataset[0][0].shape[-1]
    mcfg = ModelConfig(image_size=size)
    model = DenoiserModel.initialize(mcfg, rng_seed=args.model_seed)
    tcfg = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                       learning_rate=args.lr, cfg_dropout_prob=args.dropout,
                       T=args.T, beta_start=args.beta_start,
                       beta_end=args.beta_end, rng_seed=args.seed)
    model, history = train(model, dataset, tcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ckpt_hash = save_checkpoint(out, model)
    entries = _manifest_dict(args)
    entries["model_hash"] = ckpt_hash.hex()
    entries["loss_first"] = history[0]
    entries["loss_last"] = history[-1]
    write_manifest(out.with_suffix(out.suffix + ".manifest.txt"), entries)
    Path(str(out) + ".loss.txt").write_text(
        "\n".join(f"{i}\t{l:.8g}" for i, l in enumerate(history)) + "\n")
    print(f"trained {args.epochs} epochs; loss {history[0]:.4g} -> {history[-1]:.4g}")
    return 0


# ---------------------------------------------------------------------------
# analyze

def cmd_analyze(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    sched = make_schedule(args.T, args.beta_start, args.beta_end)
    out = Path(args.out)
    reused = False
    basis = load_basis_if_matching(out, args.concept, model) if out.exists() else None
    if basis is not None:
        reused = True
    else:
        ts = default_basis_timesteps(sched, args.sample_steps, args.fraction,
                                     extra=(default_probe_t(sched),))
        basis = build_basis(model, _concept_id(args.concept), sched,
                            guidance_timesteps=ts, n_seeds=args.n_seeds,
                            n_basis=args.n_basis, invert_steps=args.invert_steps,
                            rng_seed=args.seed, site=args.site)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_basis(out, basis)
    entries = _manifest_dict(args)
    entries["model_hash"] = model_fingerprint(model).hex()
    entries["reused_existing_basis"] = reused
    write_manifest(out.with_suffix(out.suffix + ".manifest.txt"), entries)
    print(("reused" if reused else "built") + f" basis for {args.concept!r} "
          f"({basis.n_seeds} seeds, N_b={basis.n_basis}, {len(basis.entries)} timesteps)")
    return 0


# ---------------------------------------------------------------------------
# invert

def cmd_invert(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    sched = make_schedule(args.T, args.beta_start, args.beta_end)
    img = read_pgm(args.image)
    prompt = ConceptPrompt(
        _concept_id(args.concept) if args.concept else None,
        _style_id(args.style))
    plan = uniform_plan(sched.T, args.steps, "invert")
    traj = run(model, Tensor(img.data[None]), prompt, plan, sched,
               s=args.cfg_scale)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_latent(out, traj.latents[-1])
    entries = _manifest_dict(args)
    entries["model_hash"] = model_fingerprint(model).hex()
    write_manifest(out.with_suffix(out.suffix + ".manifest.txt"), entries)
    print(f"inverted {args.image} over {args.steps} steps -> {out}")
    return 0


# ---------------------------------------------------------------------------
# synthesize

def _guidance_config(args) -> GuidanceConfig:
    return GuidanceConfig(
        lambda_s=args.lambda_s,
        lambda_a=args.lambda_a,
        w=args.w,
        s=args.cfg_scale,
        n_steps=args.steps,
        invert_steps=args.invert_steps,
        guidance_fraction=args.fraction,
        n_a=args.n_a,
        n_b_used=args.n_b,
        mask_mode=args.mask_mode,
        threshold_mode=args.threshold_mode,
        hard_threshold=args.hard_threshold,
        feature_site=args.site,
        i2i_fixed_seed=args.i2i_fixed_seed,
        i2i_no_mask=args.i2i_no_mask,
    )


def cmd_synthesize(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    sched = make_schedule(args.T, args.beta_start, args.beta_end)
    basis = load_basis(args.basis)
    cfg = _guidance_config(args)
    prompt = ConceptPrompt(_concept_id(args.concept), _style_id(args.style))
    provided = None
    if args.mask:
        provided = (read_pgm(args.mask).data[0] > 0.5).astype(np.float64)
    targets = []
    for cond_path in args.cond:
        cond_img = read_pgm(cond_path)
        from .shapes import ConditionImage

        cond = ConditionImage("natural", cond_img)
        targets.append(prepare_target(model, cond, basis, prompt, cfg, sched,
                                      provided_mask=provided))
    image, sibling, diags = guided_sample(model, prompt, targets, basis, cfg,
                                          rng_seed=args.seed, sched=sched)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_pgm(out / "image.pgm", image)
    write_pgm(out / "sibling.pgm", sibling)
    write_diagnostics(out / "diag.tsv", diags)
    entries = _manifest_dict(args)
    entries["lambda_a"] = cfg.lambda_a_value
    entries["model_hash"] = model_fingerprint(model).hex()
    entries["basis_concept"] = basis.concept_key
    entries["basis_model_hash"] = basis.model_hash.hex()
    write_manifest(out / "manifest.txt", entries)
    print(f"synthesized {out}/image.pgm (+ sibling, diagnostics)")
    return 0


# ---------------------------------------------------------------------------
# evaluate

def cmd_evaluate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    sched = make_schedule(args.T, args.beta_start, args.beta_end)
    img = read_pgm(args.image)
    report = EvalReport()
    if args.image_b:
        img_b = read_pgm(args.image_b)
        report.self_sim = self_similarity_dist(model, img, img_b, sched)
        if args.basis:
            basis = load_basis(args.basis)
            report.appearance_dist = appearance_dist(model, basis, img, img_b, sched)
    if args.probe_data and args.concept:
        dataset = _load_dataset(Path(args.probe_data))
        probe = train_concept_probe(model, dataset, sched)
        report.concept_acc = concept_accuracy(
            probe, model, [img], [ConceptPrompt(_concept_id(args.concept), None)], sched)
    if args.spec_concept:
        from .shapes import ShapeSpec

        spec = ShapeSpec(args.spec_concept, "solid", 1.0,
                         (args.spec_center_x, args.spec_center_y),
                         args.spec_scale, args.spec_rotation, 0.0)
        report.fg_iou, report.bg_leakage = structure_overlap(img.data, spec)
    for line in report.lines():
        print(line)
    print(report_table([report]), end="")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        Path(args.out, "report.txt").write_text(
            "\n".join(report.lines()) + "\n" + report_table([report]))
        write_manifest(Path(args.out, "manifest.txt"), _manifest_dict(args))
    return 0


# ---------------------------------------------------------------------------
# ablate

SWEEPS = ("n_s", "n_b", "guidance", "site", "fraction", "lambda", "threshold", "reuse")


def _probe_conditions(model, n, seed):
    """Fixed probe set: one condition per spec, cycling modalities."""
    specs = sample_specs(n, rng_seed=seed)
    mods = [m for m in MODALITIES if m != "natural"]
    return [(spec, derive_condition(spec, mods[i % len(mods)], model.config.image_size))
            for i, spec in enumerate(specs)]


def _run_probe_point(model, sched, basis, cfg, probe, seed):
    """Guided synthesis on each probe condition; returns one mean EvalReport."""
    grid = model.config.feature_size
    reports = []
    for i, (spec, cond) in enumerate(probe):
        mask = silhouette_mask(spec, grid).astype(np.float64)
        target = prepare_target(model, cond, basis, spec.prompt(), cfg, sched,
                                provided_mask=mask)
        image, sibling, _ = guided_sample(model, spec.prompt(), [target], basis,
                                          cfg, rng_seed=seed + i, sched=sched)
        fg_iou, bg_leak = structure_overlap(image.data, spec)
        rep = EvalReport(fg_iou=fg_iou, bg_leakage=bg_leak)
        rep.self_sim = self_similarity_dist(model, image, render(spec, model.config.image_size), sched)
        reports.append(rep)
    mean = EvalReport(
        self_sim=float(np.mean([r.self_sim for r in reports])),
        fg_iou=float(np.mean([r.fg_iou for r in reports])),
        bg_leakage=float(np.mean([r.bg_leakage for r in reports])),
    )
    return mean


def cmd_ablate(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    sched = make_schedule(args.T, args.beta_start, args.beta_end)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    probe = _probe_conditions(model, args.probe_n, args.seed + 9000)
    ts = default_basis_timesteps(sched, args.steps, 1.0,
                                 extra=(default_probe_t(sched),))

    def mk_basis(concept_id=0, n_seeds=None, n_basis=None, site="keys"):
        return build_basis(
            model, concept_id, sched, guidance_timesteps=ts,
            n_seeds=args.n_seeds if n_seeds is None else n_seeds,
            n_basis=args.n_basis if n_basis is None else n_basis,
            invert_steps=args.invert_steps, rng_seed=args.seed, site=site)

    def mk_cfg(**kw):
        base = dict(lambda_s=args.lambda_s, s=args.cfg_scale, n_steps=args.steps,
                    invert_steps=args.invert_steps, guidance_fraction=args.fraction,
                    mask_mode="provided", n_a=min(args.n_a, args.n_basis))
        base.update(kw)
        return GuidanceConfig(**base)

    rows = [["sweep", "point", "self_sim", "fg_iou", "bg_leakage"]]

    def add_row(point, rep):
        rows.append([args.sweep, str(point), f"{rep.self_sim:.6g}",
                     f"{rep.fg_iou:.6g}", f"{rep.bg_leakage:.6g}"])
        print("\t".join(rows[-1]))

    if args.sweep == "n_s":
        for n_s in (1, 5, args.n_seeds):
            rep = _run_probe_point(model, sched, mk_basis(n_seeds=n_s), mk_cfg(),
                                   probe, args.seed)
            add_row(n_s, rep)
    elif args.sweep == "n_b":
        basis = mk_basis()
        nb = 1
        while nb <= basis.n_basis:
            rep = _run_probe_point(model, sched, basis,
                                   mk_cfg(n_b_used=nb, n_a=min(args.n_a, nb)),
                                   probe, args.seed)
            add_row(nb, rep)
            nb *= 2
    elif args.sweep == "guidance":
        basis = mk_basis()
        for on in (True, False):
            cfg = mk_cfg() if on else mk_cfg(lambda_s=0.0, lambda_a=0.0)
            add_row("on" if on else "off",
                    _run_probe_point(model, sched, basis, cfg, probe, args.seed))
    elif args.sweep == "site":
        for site in ("keys", "queries", "values", "conv"):
            rep = _run_probe_point(model, sched, mk_basis(site=site),
                                   mk_cfg(feature_site=site), probe, args.seed)
            add_row(site, rep)
    elif args.sweep == "fraction":
        basis = mk_basis()
        for frac in (0.0, 0.2, 0.4, 0.6, 0.8, 1.0):
            rep = _run_probe_point(model, sched, basis,
                                   mk_cfg(guidance_fraction=frac), probe, args.seed)
            add_row(frac, rep)
    elif args.sweep == "lambda":
        basis = mk_basis()
        for lam_s in (400.0, 600.0, 1000.0):
            for mult in (0.0, 0.2):
                rep = _run_probe_point(model, sched, basis,
                                       mk_cfg(lambda_s=lam_s, lambda_a=mult * lam_s),
                                       probe, args.seed)
                add_row(f"ls={lam_s:g},la={mult * lam_s:g}", rep)
    elif args.sweep == "threshold":
        basis = mk_basis()
        points = [("dynamic", mk_cfg(threshold_mode="dynamic"))]
        for hard in (0.1, 0.5, 1.0):
            points.append((f"hard:{hard:g}",
                           mk_cfg(threshold_mode="hard", hard_threshold=hard)))
        for name, cfg in points:
            add_row(name, _run_probe_point(model, sched, basis, cfg, probe, args.seed))
    elif args.sweep == "reuse":
        donor = mk_basis(concept_id=0)
        for cid, concept in enumerate(CONCEPTS):
            sub = [(s, c) for s, c in probe if s.concept == concept] or probe[:1]
            rep = _run_probe_point(model, sched, donor, mk_cfg(), sub, args.seed)
            add_row(f"{CONCEPTS[0]}->{concept}", rep)
    path = out / f"ablate_{args.sweep}.tsv"
    path.write_text("\n".join("\t".join(r) for r in rows) + "\n", encoding="utf-8")
    write_manifest(out / "manifest.txt", _manifest_dict(args))
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser assembly

def _add_schedule_flags(sp):
    sp.add_argument("--T", type=int, default=1000)
    sp.add_argument("--beta-start", dest="beta_start", type=float, default=1e-4)
    sp.add_argument("--beta-end", dest="beta_end", type=float, default=0.02)


def build_parser() -> _Parser:
    p = _Parser(prog="subguide", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the procedural shape corpus")
    g.add_argument("--out")
    g.add_argument("--n", type=int, default=1024)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--config")
    g.set_defaults(func=cmd_gen_data, _required=("out",))

    t = sub.add_parser("train", help="train the denoiser on a generated corpus")
    t.add_argument("--data")
    t.add_argument("--out")
    t.add_argument("--epochs", type=int, default=16)
    t.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    t.add_argument("--lr", type=float, default=2e-3)
    t.add_argument("--dropout", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--model-seed", dest="model_seed", type=int, default=0)
    _add_schedule_flags(t)
    t.add_argument("--config")
    t.set_defaults(func=cmd_train, _required=("data", "out"))

    a = sub.add_parser("analyze", help="build (or reuse) a semantic basis")
    a.add_argument("--ckpt")
    a.add_argument("--concept")
    a.add_argument("--out")
    a.add_argument("--n-seeds", dest="n_seeds", type=int, default=20)
    a.add_argument("--n-basis", dest="n_basis", type=int, default=64)
    a.add_argument("--invert-steps", dest="invert_steps", type=int, default=200)
    a.add_argument("--sample-steps", dest="sample_steps", type=int, default=200)
    a.add_argument("--fraction", type=float, default=0.6)
    a.add_argument("--site", default="keys")
    a.add_argument("--seed", type=int, default=0)
    _add_schedule_flags(a)
    a.add_argument("--config")
    a.set_defaults(func=cmd_analyze, _required=("ckpt", "concept", "out"))

    i = sub.add_parser("invert", help="DDIM-invert an image to a latent")
    i.add_argument("--ckpt")
    i.add_argument("--image")
    i.add_argument("--out")
    i.add_argument("--steps", type=int, default=1000)
    i.add_argument("--concept")
    i.add_argument("--style")
    i.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=0.0)
    _add_schedule_flags(i)
    i.add_argument("--config")
    i.set_defaults(func=cmd_invert, _required=("ckpt", "image", "out"))

    s = sub.add_parser("synthesize", help="guided generation from conditions")
    s.add_argument("--ckpt")
    s.add_argument("--basis")
    s.add_argument("--cond", action="append",
                   help="condition image (repeat for compositional control)")
    s.add_argument("--concept")
    s.add_argument("--style")
    s.add_argument("--out")
    s.add_argument("--lambda-s", dest="lambda_s", type=float, default=600.0)
    s.add_argument("--lambda-a", dest="lambda_a", type=float, default=None)
    s.add_argument("--w", type=float, default=1.0)
    s.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=2.0)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--invert-steps", dest="invert_steps", type=int, default=1000)
    s.add_argument("--fraction", type=float, default=0.6)
    s.add_argument("--n-a", dest="n_a", type=int, default=2)
    s.add_argument("--n-b", dest="n_b", type=int, default=None)
    s.add_argument("--mask-mode", dest="mask_mode", default="xattn",
                   choices=("xattn", "provided", "ones"))
    s.add_argument("--mask", help="binary PGM at the feature grid (provided mode)")
    s.add_argument("--threshold-mode", dest="threshold_mode", default="dynamic",
                   choices=("dynamic", "hard"))
    s.add_argument("--hard-threshold", dest="hard_threshold", type=float, default=0.5)
    s.add_argument("--site", default="keys")
    s.add_argument("--i2i-fixed-seed", dest="i2i_fixed_seed", action="store_true")
    s.add_argument("--i2i-no-mask", dest="i2i_no_mask", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    _add_schedule_flags(s)
    s.add_argument("--config")
    s.set_defaults(func=cmd_synthesize, _required=("ckpt", "basis", "cond", "concept", "out"))

    e = sub.add_parser("evaluate", help="metric report for generated images")
    e.add_argument("--ckpt")
    e.add_argument("--image")
    e.add_argument("--image-b", dest="image_b")
    e.add_argument("--basis")
    e.add_argument("--probe-data", dest="probe_data")
    e.add_argument("--concept")
    e.add_argument("--spec-concept", dest="spec_concept")
    e.add_argument("--spec-scale", dest="spec_scale", type=float, default=0.3)
    e.add_argument("--spec-center-x", dest="spec_center_x", type=float, default=0.5)
    e.add_argument("--spec-center-y", dest="spec_center_y", type=float, default=0.5)
    e.add_argument("--spec-rotation", dest="spec_rotation", type=float, default=0.0)
    e.add_argument("--out")
    _add_schedule_flags(e)
    e.add_argument("--config")
    e.set_defaults(func=cmd_evaluate, _required=("ckpt", "image"))

    b = sub.add_parser("ablate", help="sweep one knob over a fixed probe set")
    b.add_argument("--ckpt")
    b.add_argument("--out")
    b.add_argument("--sweep", choices=SWEEPS)
    b.add_argument("--probe-n", dest="probe_n", type=int, default=4)
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--invert-steps", dest="invert_steps", type=int, default=50)
    b.add_argument("--n-seeds", dest="n_seeds", type=int, default=8)
    b.add_argument("--n-basis", dest="n_basis", type=int, default=64)
    b.add_argument("--n-a", dest="n_a", type=int, default=2)
    b.add_argument("--lambda-s", dest="lambda_s", type=float, default=600.0)
    b.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=2.0)
    b.add_argument("--fraction", type=float, default=0.6)
    b.add_argument("--seed", type=int, default=0)
    _add_schedule_flags(b)
    b.add_argument("--config")
    b.set_defaults(func=cmd_ablate, _required=("ckpt", "out", "sweep"))
    for sp in (g, t, a, i, s, e, b):
        sp.set_defaults(_sp=sp)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    try:
        args = parser.parse_args(argv)
        args = _apply_config_file(args, argv)
        missing = [k for k in getattr(args, "_required", ()) if not getattr(args, k)]
        if missing:
            raise UsageError("missing required arguments: "
                             + ", ".join("--" + m.replace("_", "-") for m in missing))
        return args.func(args)
    except SystemExit as exc:  # argparse --help/--version
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (SubguideError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
