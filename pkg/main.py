#!/usr/bin/env python3
"""
Welfare-gain bounds - command-line entry

Usage:
    # Bounds for switching from "education <= 11" to "education <= 12"
    python main.py estimate --data jtpa.csv --y earnings --d training --x education \\
        --policy-star "education <= 11" --policy "education <= 12" \\
        --regime worst-case iv-worst-case --z assignment --support 0 160000 --k 2 --seed 1

    # Same run from a configuration file (flags override file keys)
    python main.py estimate --config config/example1_estimate.yaml --seed 7

    # Coverage study on the built-in design
    python main.py simulate --config config/coverage_study.yaml --threads 4

    # Population welfare gain of the built-in design
    python main.py oracle --dgp builtin --policy-star "x <= 11" --policy "x <= 12" --regime gain
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional

from dotenv import load_dotenv

from src.config_loader import RunConfigLoader
from src.errors import BoundsError, UsageError
from src.orchestrator import BoundsOrchestrator, canonical_json

load_dotenv()

logger = logging.getLogger("main")


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that reports problems as UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(message, module="cli")


def _common_flags() -> argparse.ArgumentParser:
    common = CliParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with the same keys as the flags")
    common.add_argument("--policy-star", help="Benchmark policy, e.g. \"education <= 11\"")
    common.add_argument("--policy", help="New policy")
    common.add_argument("--regime", nargs="+", help="Identification regime(s)")
    common.add_argument("--seed", type=int, help="Seed for every random draw")
    common.add_argument("--alpha", type=float, help="Confidence level (default 0.95)")
    common.add_argument("--k", type=int, help="Cross-fitting folds (default 2)")
    common.add_argument("--first-stage", choices=["cell-means", "polynomial"])
    common.add_argument("--degree", type=int, help="Polynomial degree for outcome regressions")
    common.add_argument("--propensity-degree", type=int, help="Polynomial degree for the logistic propensity")
    common.add_argument("--empty-cell-policy", choices=["error", "zero"])
    common.add_argument("--fallback-value", type=float)
    common.add_argument("--adjustment-mode", choices=["paper-faithful", "instrument-weighted"])
    common.add_argument("--dgp", help="'builtin' or a YAML file of design parameters")
    common.add_argument("--output", "-o", help="Output file (stdout when absent)")
    common.add_argument("--format", choices=["json", "text", "both"])
    common.add_argument("--threads", type=int, help="Worker processes (env BOUNDS_THREADS)")
    common.add_argument("--verbose", "-v", action="store_true", help="DEBUG logging")
    common.add_argument("--quiet", "-q", action="store_true", help="Warnings only")
    return common


def build_parser() -> CliParser:
    common = _common_flags()
    parser = CliParser(
        prog="main.py",
        description="Bounds on the welfare gain of a treatment-assignment policy switch",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=__doc__,
    )
    commands = parser.add_subparsers(dest="command", metavar="{estimate,simulate,oracle}")
    commands.required = True

    estimate = commands.add_parser("estimate", parents=[common], help="Estimate bounds from a CSV dataset")
    estimate.add_argument("--data", help="CSV file with a header row")
    estimate.add_argument("--y", help="Outcome column")
    estimate.add_argument("--d", help="Binary treatment column")
    estimate.add_argument("--x", nargs="+", help="Covariate column(s)")
    estimate.add_argument("--z", help="Instrument column")
    estimate.add_argument("--support", nargs=2, type=float, metavar=("LOWER", "UPPER"))
    estimate.add_argument("--iv-mode", choices=["binary-monotone", "general-discrete"])
    estimate.add_argument("--miv-z", help="Monotone instrument column (defaults to --z)")
    estimate.add_argument("--miv-bins", type=int, help="Quantile bins for the monotone instrument")
    estimate.add_argument("--miv-binning", choices=["quantile", "levels"])
    estimate.add_argument("--miv-cuts", nargs="+", type=float, help="Cut points for --miv-binning levels")

    simulate = commands.add_parser("simulate", parents=[common], help="Monte Carlo coverage study")
    simulate.add_argument("--ns", nargs="+", type=int, help="Sample sizes")
    simulate.add_argument("--reps", type=int, help="Replications per sample size")
    simulate.add_argument("--variants", nargs="+", help="estimator:fitting pairs")
    simulate.add_argument("--target-regime", help="Regime of the studied endpoint")
    simulate.add_argument("--target-side", choices=["lower", "upper"])
    simulate.add_argument("--failure-threshold", type=float)

    commands.add_parser("oracle", parents=[common], help="Population values of the simulation design")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    if verbose:
        level = logging.DEBUG
    elif quiet:
        level = logging.WARNING
    else:
        level = getattr(logging, os.getenv("BOUNDS_LOG_LEVEL", "INFO").upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _flags(args: argparse.Namespace) -> Dict[str, Any]:
    skip = {"command", "config", "verbose", "quiet"}
    flags = {key: value for key, value in vars(args).items() if key not in skip and value is not None}
    if "threads" not in flags and os.getenv("BOUNDS_THREADS"):
        try:
            flags["threads"] = int(os.environ["BOUNDS_THREADS"])
        except ValueError:
            raise UsageError(f"BOUNDS_THREADS must be an integer, got {os.environ['BOUNDS_THREADS']!r}", module="cli")
    return flags


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command, print or write its output; returns the exit status."""
    try:
        args = build_parser().parse_args(argv)
        configure_logging(args.verbose, args.quiet)
        config, values = RunConfigLoader(args.config).build(args.command, _flags(args))
        result = BoundsOrchestrator(config, values.get("_partial_schema")).run()
    except BoundsError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code

    if not result.success:
        for error in result.errors:
            print(f"error: {error}", file=sys.stderr)
        return result.exit_code

    if result.output_path is None:
        if config.output.format == "text":
            sys.stdout.write(result.text)
        else:
            sys.stdout.write(canonical_json(result.payload))
    return 0


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
