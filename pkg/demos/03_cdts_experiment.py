"""Train the same learnable scene with and without cousin-data supervision
and compare them on the lane-change views.

The default settings are cut down so the demo finishes in a few minutes;
pass --full for the acceptance-sized run (about 10 minutes per variant pair).

    python demos/03_cdts_experiment.py [--full] [--seed N] [--out DIR]
"""
import argparse
from pathlib import Path

from splat4d import cli

ap = argparse.ArgumentParser()
ap.add_argument("--full", action="store_true")
ap.add_argument("--seed", type=int, default=0)
ap.add_argument("--out", default="demo_out/experiment")
args = ap.parse_args()

cfg = cli.ExperimentConfig(maneuvers=["lane_change"])
if not args.full:
    cfg.scene.frames, cfg.init.n = 20, 800
    cfg.train = dict(cfg.train, iterations=400)
cfg = cli.resolve_seeds(cfg, args.seed)

# synth -> propose -> train baseline and cdts -> evaluate on novel views
reports = cli.run_experiment(cfg, Path(args.out))

by = {r.method: r for r in reports}
b, c = by["baseline"], by["cdts"]
print(f"\nNTA-IoU {b.nta_iou:.3f} -> {c.nta_iou:.3f} ({100 * (c.nta_iou / b.nta_iou - 1):+.1f}%)")
print(f"NTL-IoU {b.ntl_iou:.2f} -> {c.ntl_iou:.2f}")
print(f"FFD     {b.ffd:.3f} -> {c.ffd:.3f}")
print("renders, checkpoints and reports are under", args.out)
