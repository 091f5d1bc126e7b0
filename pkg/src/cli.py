"""
Command-line entry point: `python -m src.cli <subcommand> --config run.ini`.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import Subcommand, configure_logging, load_config
from .errors import BrittleHomogError, ConfigError
from .service import EXIT_INFRASTRUCTURE, ExperimentService, summarize

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brittle-homog", description="Numerical homogenization of high-contrast brittle composites"
    )
    parser.add_argument("subcommand", nargs="?", choices=[s.value for s in Subcommand])
    parser.add_argument("--config", type=Path, help="sectioned key = value run configuration")
    parser.add_argument("--output", type=Path, help="directory for tables and charts")
    parser.add_argument("--cache-dir", type=Path, help="result cache directory")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR (default from LOG_LEVEL)")
    parser.add_argument("--host", default="0.0.0.0")
    parser.add_argument("--port", type=int, default=8000)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns 0, 1 on infrastructure failure or 2 on a failed bound check."""
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)

    try:
        config = load_config(args.config)
        updates = {}
        if args.output is not None:
            updates["directory"] = args.output
        if args.cache_dir is not None:
            updates["cache_dir"] = args.cache_dir
        if updates:
            config = config.model_copy(update={"output": config.output.model_copy(update=updates)})
        subcommand = Subcommand(args.subcommand) if args.subcommand else config.subcommand
        if subcommand is None:
            raise ConfigError("no subcommand given on the command line or in [run] subcommand")
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE

    if subcommand is Subcommand.SERVE:
        import uvicorn

        from .api import create_app

        uvicorn.run(create_app(config.cache_root, config.output.directory), host=args.host, port=args.port)
        return 0

    try:
        outcome = ExperimentService(config).run(subcommand)
    except BrittleHomogError as e:
        logger.error("%s failed: %s", subcommand.value, e)
        return EXIT_INFRASTRUCTURE

    for line in summarize(outcome):
        print(line, file=sys.stderr)
    for path in outcome.artifacts:
        print(path)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
