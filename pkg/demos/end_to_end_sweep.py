"""
End-to-end semantic link: train, sweep, compare
===============================================

Runs the three training stages with a shortened sweep, then prints the
mIoU of each CSI mode against SNR. Training takes a few minutes on one
CPU; the same thing is available as ``dmce train`` and ``dmce sweep``.
"""

import dataclasses
import sys

from dmce.experiments import ExperimentConfig, cmd_sweep, cmd_train

out = sys.argv[1] if len(sys.argv) > 1 else "runs/demo"
cfg = ExperimentConfig(out=out)
cfg.sweep = dataclasses.replace(cfg.sweep, snr_db=(-4, 0, 4, 8, 12), trials=300)

cmd_train(cfg)
path = cmd_sweep(cfg, out)

# one row per (snr, mode); perfect CSI bounds what better estimates can buy
for line in path.read_text().splitlines():
    cols = line.split(",")
    print(f"{cols[0]:>8s} {cols[1]:>12s} {cols[3]:>14.14s} {cols[6]:>22.22s}")
