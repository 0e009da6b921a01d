# main.py - Command-line entry point
import argparse
import logging
import sys
import traceback

# Local imports
from commands import register_all_commands
from utils.errors import ContractViolation, FormatError
from utils.helpers import set_thread_count
from utils.logging_setup import setup_logging

logger = logging.getLogger()

EXIT_CONTRACT = 2
EXIT_IO = 3


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--json", action="store_true", help="machine-readable JSON on stdout")
    common.add_argument("--out", help="output directory (nothing is written elsewhere)")
    common.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    common.add_argument("--threads", type=int, default=None, help="worker threads (0 = auto, default LSK_THREADS)")

    parser = argparse.ArgumentParser(prog="lsk", description="Large selective kernel toolkit")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_all_commands(subparsers, common)
    return parser


def run(argv=None):
    """Parse `argv`, run the subcommand and map failures to exit codes."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 for --help
        return e.code if isinstance(e.code, int) else EXIT_CONTRACT

    setup_logging(level=args.log_level)
    try:
        set_thread_count(args.threads)
        return args.handler(args)
    except ContractViolation as e:
        logger.error(f"{args.command}: {e}")
        logger.error(traceback.format_exc())
        return EXIT_CONTRACT
    except (FormatError, OSError) as e:
        logger.error(f"{args.command}: {e}")
        logger.error(traceback.format_exc())
        return EXIT_IO
    finally:
        set_thread_count(None)


if __name__ == "__main__":
    sys.exit(run())
