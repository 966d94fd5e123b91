"""
verifem command line entry point

    verifem solve|estimate|adapt|study --config <path> [--out <dir>] [--verbose] [--summary]

Exit codes: 0 success, 1 input errors, 2 contract violations.
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

from verifem.api.commands import COMMANDS, run
from verifem.config import parse_config
from verifem.errors import VerifemError

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="verifem",
        description="A posteriori error estimation and adaptivity for 2D P1 diffusion problems",
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub = subparsers.add_parser(name, help=f"run the {name} pipeline")
        sub.add_argument("--config", required=True, help="run file (INI style)")
        sub.add_argument("--out", default=None, help="output directory (default: [output] directory)")
        sub.add_argument("--verbose", action="store_true", help="debug logging")
        sub.add_argument("--summary", action="store_true", help="print an effectivity report")
    return parser


def configure_logging(verbose: bool = False):
    level = logging.DEBUG if verbose else os.getenv("VERIFEM_LOG_LEVEL", "INFO").upper()
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    try:
        config = parse_config(args.config)
        result = run(args.command, config, args.out)
    except VerifemError as e:
        logger.error(f"{args.command} failed ({type(e).__name__}): {e.message}")
        return e.exit_code
    if args.summary and result.metrics is not None:
        result.metrics.print_report()
    for key, value in result.summary.items():
        logger.info(f"{key}: {value:.17g}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
