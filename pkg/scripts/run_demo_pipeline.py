#!/usr/bin/env python3
"""End-to-end demo at reduced scale: corpus -> training -> basis -> guided
synthesis -> evaluation. Finishes in a few minutes on one CPU core; pass
--full for reference-scale settings (much slower).

Run from the repository root:  python scripts/run_demo_pipeline.py --out /tmp/demo
"""

import argparse
import sys
from pathlib import Path

from subguide.cli import main as cli


def sh(args):
    print("\n$ subguide " + " ".join(args), flush=True)
    code = cli(args)
    if code != 0:
        sys.exit(code)


def run(out: Path, full: bool):
    out.mkdir(parents=True, exist_ok=True)
    data = out / "data"
    ckpt = out / "model.fckp"
    basis = out / "circle.fcbs"
    synth = out / "synth"

    if full:
        n, epochs, T = 1024, 14, 1000
        steps, invert, analyze_invert = "200", "1000", "200"
        n_seeds, n_basis, lam = "20", "64", "600"
    else:
        n, epochs, T = 192, 6, 300
        steps, invert, analyze_invert = "60", "120", "120"
        n_seeds, n_basis, lam = "6", "32", "600"

    sh(["gen-data", "--out", str(data), "--n", str(n), "--seed", "0"])
    sh(["train", "--data", str(data), "--out", str(ckpt), "--epochs", str(epochs),
        "--T", str(T), "--seed", "1"])
    sh(["analyze", "--ckpt", str(ckpt), "--concept", "circle", "--out", str(basis),
        "--n-seeds", n_seeds, "--n-basis", n_basis, "--invert-steps", analyze_invert,
        "--sample-steps", steps, "--T", str(T)])

    # derive an edge condition from a held-out spec and synthesize against it
    from subguide.io import write_pgm
    from subguide.shapes import ShapeSpec, derive_condition

    spec = ShapeSpec("circle", "solid", 0.95, (0.38, 0.6), 0.24, 0.0, 0.05)
    cond = out / "cond_edge.pgm"
    write_pgm(cond, derive_condition(spec, "edge").pixels)
    sh(["synthesize", "--ckpt", str(ckpt), "--basis", str(basis), "--cond", str(cond),
        "--concept", "circle", "--style", "speckle", "--lambda-s", lam,
        "--steps", steps, "--invert-steps", invert, "--T", str(T),
        "--mask-mode", "xattn", "--seed", "7", "--out", str(synth)])
    sh(["evaluate", "--ckpt", str(ckpt), "--image", str(synth / "image.pgm"),
        "--image-b", str(synth / "sibling.pgm"), "--basis", str(basis),
        "--T", str(T), "--spec-concept", "circle", "--spec-scale", "0.24",
        "--spec-center-x", "0.38", "--spec-center-y", "0.6",
        "--out", str(out / "eval")])
    print(f"\ndemo artifacts under {out}")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="/tmp/subguide_demo")
    ap.add_argument("--full", action="store_true")
    a = ap.parse_args()
    run(Path(a.out), a.full)
