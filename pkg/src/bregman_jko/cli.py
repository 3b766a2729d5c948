#!/usr/bin/env python3
"""
Command-line entry point.

Usage:
    bregman-jko run experiments/heat-cosine.yaml --workers 3
    bregman-jko validate experiments/bregman-quartic.yaml
    bregman-jko oracle experiments/ou.yaml

Exit codes: 0 on success, 1 for an unusable config or a locked output
directory, 2 when any sweep point failed (run) or validation found errors.
"""

import argparse
import logging
import sys
from pathlib import Path

from filelock import Timeout

from . import __version__
from .config import ExperimentConfig, load_config
from .errors import BregmanJkoError, ConfigError
from .experiment import ReportRow, run_experiment, run_oracle, validate_config


EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILED_ROWS = 2


def _load(path: Path) -> ExperimentConfig:
    try:
        return load_config(path)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        for line in e.diagnostics:
            print(f"  - {line}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _print_row(row: ReportRow) -> None:
    if row.failed:
        print(f"  tau={row.tau:g} n={row.resolution}: FAILED ({row.reason})", file=sys.stderr)
    else:
        print(
            f"  tau={row.tau:g} n={row.resolution}: L1 {row.l1_error:.3e},"
            f" weak {row.weak_residual:.3e}, {row.wall_time:.1f}s",
            file=sys.stderr,
        )


def cmd_run(args: argparse.Namespace) -> int:
    config = _load(args.config)
    if args.output is not None:
        config.output = args.output
    points = len(config.sweep_points)
    print(f"Running {config.name}: {points} sweep point(s) -> {config.output}", file=sys.stderr)
    try:
        report = run_experiment(config, workers=args.workers, progress=_print_row)
    except Timeout:
        print(f"Error: {config.output} is locked by another run", file=sys.stderr)
        return EXIT_USAGE

    failed = report.failed_rows
    print(f"Done: {points - len(failed)}/{points} point(s) succeeded", file=sys.stderr)
    return EXIT_FAILED_ROWS if failed else EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = _load(args.config)
    diagnostics = validate_config(config)
    for diagnostic in diagnostics:
        print(diagnostic)
    if any(d.severity == "error" for d in diagnostics):
        return EXIT_FAILED_ROWS
    print(f"{args.config}: OK")
    return EXIT_OK


def cmd_oracle(args: argparse.Namespace) -> int:
    config = _load(args.config)
    if args.output is not None:
        config.output = args.output
    try:
        written = run_oracle(config)
    except Timeout:
        print(f"Error: {config.output} is locked by another run", file=sys.stderr)
        return EXIT_USAGE
    except BregmanJkoError as e:
        print(f"Error: oracle failed: {e}", file=sys.stderr)
        return EXIT_FAILED_ROWS
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bregman-jko",
        description="JKO flows with general transport costs, checked against Fokker-Planck oracles",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--verbose", "-v",
        action="store_true",
        help="Log solver progress at INFO level",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run the sweep and write the report")
    run.add_argument("config", type=Path, help="Path to the experiment YAML file")
    run.add_argument(
        "--workers", "-j",
        type=int,
        default=1,
        help="Number of worker processes (default: 1)",
    )
    run.add_argument(
        "--output", "-o",
        type=Path,
        help="Override the output directory from the config",
    )
    run.set_defaults(func=cmd_run)

    validate = sub.add_parser("validate", help="Resolve names and check the cost")
    validate.add_argument("config", type=Path, help="Path to the experiment YAML file")
    validate.set_defaults(func=cmd_validate)

    oracle = sub.add_parser("oracle", help="Write the oracle densities only")
    oracle.add_argument("config", type=Path, help="Path to the experiment YAML file")
    oracle.add_argument(
        "--output", "-o",
        type=Path,
        help="Override the output directory from the config",
    )
    oracle.set_defaults(func=cmd_oracle)
    return parser


def main(argv: list[str] | None = None) -> None:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    sys.exit(args.func(args))


if __name__ == "__main__":
    main()
