#!/usr/bin/env python3
"""Run every ablation sweep against a trained checkpoint.

Expects the artifacts of scripts/run_demo_pipeline.py (or any checkpoint):
  python scripts/run_ablations.py --ckpt /tmp/subguide_demo/model.fckp --out /tmp/subguide_demo/ablations
Settings are sized for a coffee-break run; raise --steps/--probe-n for
smoother curves.
"""

import argparse
import sys

from subguide.cli import SWEEPS, main as cli

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--ckpt", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--T", default="300")
    ap.add_argument("--steps", default="60")
    ap.add_argument("--invert-steps", default="120")
    ap.add_argument("--probe-n", default="4")
    ap.add_argument("--sweeps", nargs="*", default=list(SWEEPS))
    a = ap.parse_args()
    for sweep in a.sweeps:
        print(f"\n=== sweep: {sweep} ===", flush=True)
        code = cli(["ablate", "--ckpt", a.ckpt, "--out", a.out, "--sweep", sweep,
                    "--probe-n", a.probe_n, "--steps", a.steps,
                    "--invert-steps", a.invert_steps, "--T", a.T,
                    "--n-seeds", "6", "--n-basis", "32"])
        if code != 0:
            sys.exit(code)
    print("\nall sweeps written")
