"""Command-line entry point: ``dmce {train,sweep,enhance,selftest}``.

Exit codes: 0 success, 2 configuration or input-file error (including
checkpoint/config dimension mismatches), 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import experiments
from .linalg import SingularMatrixError
from .neuralnet import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _config(args) -> experiments.ExperimentConfig:
    if args.config:
        return experiments.load_config(args.config)
    return experiments.ExperimentConfig()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmce", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config file (key = value)")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("train", help="run the three training stages and write checkpoints")
    common(p)
    p = sub.add_parser("sweep", help="SNR sweep over the configured modes, written as CSV")
    common(p)
    p.add_argument("--checkpoints", help="directory written by 'train' (default: the output directory)")
    p = sub.add_parser("enhance", help="enhance one CSI text file")
    common(p)
    p.add_argument("checkpoint", help="predictor checkpoint file or training directory")
    p.add_argument("csi_in")
    p.add_argument("csi_out", nargs="?")
    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    common(p)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "selftest":
            from .selftest import run_all

            return EXIT_OK if run_all(seed=args.seed or 0) else EXIT_NUMERICAL
        cfg = _config(args)
        if args.command == "train":
            out = experiments.cmd_train(cfg, args.out, args.seed)
            print(out)
        elif args.command == "sweep":
            ckpt = args.checkpoints or args.out or cfg.out
            path = experiments.cmd_sweep(cfg, ckpt, args.out, args.seed, args.threads)
            print(path)
        elif args.command == "enhance":
            sched = cfg.schedule if args.config else None
            out = args.csi_out or args.out
            if out is None:
                raise experiments.ConfigError("enhance needs an output path")
            experiments.cmd_enhance(args.checkpoint, args.csi_in, out, sched, args.seed or 0)
            print(out)
    except (experiments.ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, SingularMatrixError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
