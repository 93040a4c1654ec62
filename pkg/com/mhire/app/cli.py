import argparse
import logging
import sys
from typing import List, Optional

from com.mhire.app.config.config import Config
from com.mhire.app.services.errors import CBIError
from com.mhire.app.services.harness.harness import cmd_benchmark, cmd_estimate, cmd_simulate, cmd_validate
from com.mhire.app.services.harness.validation import FAULTS

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cbi",
        description="Jump-density estimation for CIR processes with jumps",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="simulate a path and write series.csv")
    simulate.add_argument("--config", required=True, help="TOML experiment file")
    simulate.add_argument("--out", help="output directory (default: CBI_OUTPUT_ROOT)")

    estimate = commands.add_parser("estimate", help="estimate the jump density from a series")
    estimate.add_argument("--series", required=True, help="series CSV")
    estimate.add_argument("--config", required=True, help="TOML experiment file")
    estimate.add_argument("--out", help="output directory (default: CBI_OUTPUT_ROOT)")

    validate = commands.add_parser("validate", help="run the validation suite")
    validate.add_argument("--quick", action="store_true", help="smaller grids and Monte-Carlo sizes")
    validate.add_argument("--fault", choices=sorted(FAULTS), help=argparse.SUPPRESS)

    benchmark = commands.add_parser("benchmark", help="replicate experiments over the n-ladder")
    benchmark.add_argument("--config", required=True, help="TOML experiment file")
    benchmark.add_argument("--out", help="output directory (default: CBI_OUTPUT_ROOT)")
    benchmark.add_argument("--workers", type=int, help="worker processes (default: CBI_WORKERS)")
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "simulate":
        print(cmd_simulate(args.config, args.out))
        return EXIT_OK
    if args.command == "estimate":
        print(cmd_estimate(args.series, args.config, args.out))
        return EXIT_OK
    if args.command == "validate":
        report = cmd_validate(quick=args.quick, fault=args.fault)
        print(report.table())
        return EXIT_OK if report.passed else EXIT_FAILURE
    path, summary = cmd_benchmark(args.config, args.out, args.workers)
    print(path)
    acceptance = summary["acceptance"]
    if acceptance.get("evaluated") and not acceptance["passed"]:
        logger.error(f"Benchmark acceptance failed: {acceptance}")
        return EXIT_FAILURE
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=Config().log_level)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    try:
        return run(args)
    except CBIError as e:
        logger.error(f"{e.error_type}: {e}")
        return e.exit_code
    except (ValueError, OSError) as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
