"""Command-line entry point: one subcommand per pipeline stage plus ``run``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .pipeline import (
    EXIT_MISSING,
    EXIT_NUMERICAL,
    EXIT_VALIDATION,
    STAGES,
    MissingArtifact,
    NumericalFailure,
    run_all,
    run_stage,
)
from .lssvr import SingularSystemError

log = logging.getLogger("invabc")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="invabc", description="Surrogate-based likelihood-free inverse identification.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES + ["run"]:
        p = sub.add_parser(name, help="all stages with the augmentation loop" if name == "run" else f"{name} stage")
        p.add_argument("--config", required=True, help="TOML run configuration")
        p.add_argument("--seed", type=int, default=None, help="override the configured seed")
        p.add_argument("--out", default="runs/default", help="run directory")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.seed)
    except (OSError, ValueError, TypeError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    try:
        if args.command == "run":
            return run_all(cfg, args.out)
        return run_stage(args.command, cfg, args.out)
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (NumericalFailure, SingularSystemError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
