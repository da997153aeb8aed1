"""Command line front end: ``adpower <identify|tune-pss|scan|simulate> --config FILE``."""

from __future__ import annotations

import argparse
import logging
import sys

from .cli_io import EXIT_CONFIG, EXPERIMENTS, ConfigError, load_config, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adpower",
        description="Differentiable power system simulation: identification, PSS tuning, "
                    "gradient landscape scans.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "identify": "fit parameters to a reference trajectory (MSE loss)",
        "tune-pss": "tune stabiliser parameters for damping (windowed MAE loss)",
        "scan": "loss and gradient over a 50%%-200%% grid per parameter",
        "simulate": "forward run only; writes trajectory.csv in reference format",
    }
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", required=True, help="experiment config (YAML)")
        p.add_argument("--out", help="output directory (overrides output.dir)")
        p.add_argument("--seed", type=int, help="random seed (overrides seed)")
        p.add_argument("--noise", type=float,
                       help="reference noise, standard deviation as a fraction of signal RMS")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {"experiment": args.command, "out": args.out, "seed": args.seed,
                 "noise": args.noise}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    code = run_experiment(cfg)
    print(f"{args.command}: exit {code}, results in {cfg.out_dir}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
