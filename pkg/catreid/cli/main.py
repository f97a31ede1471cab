"""`catreid` command-line entry point."""

import argparse
import logging
import sys
from typing import Optional, Sequence

from pydantic import ValidationError

from catreid import __version__
from catreid.cli import commands
from catreid.config import settings
from catreid.core.exceptions import CatReidError
from catreid.core.logging import configure_logging
from catreid.services.suite_service import describe_validation_error

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="catreid",
        description="Cat re-identification toolkit: dataset curation, training and comparison.",
    )
    parser.add_argument("--version", action="version", version=f"catreid {__version__}")
    parser.add_argument("--log-level", default=None, help=f"Logging level (default {settings.LOG_LEVEL})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="Generate a synthetic folder-per-class dataset")
    p.add_argument("--classes", type=int, default=5)
    p.add_argument("--per-class", type=int, default=20)
    p.add_argument("--total", type=int, default=None, help="Spread N images over the classes instead")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(handler=commands.cmd_synth)

    p = sub.add_parser("ingest", help="Build a manifest from a dataset directory")
    p.add_argument("--root", default=None)
    p.add_argument("--out", default=None, help="Manifest path")
    p.add_argument("--min-images", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", default=None, help="Suite file supplying defaults")
    p.set_defaults(handler=commands.cmd_ingest)

    p = sub.add_parser("preprocess", help="Detect, square-crop and resize every image")
    p.add_argument("--manifest", default=None)
    p.add_argument("--detector", default=None, help="stub:FILE, http(s)://URL or cmd:COMMAND")
    p.add_argument("--out", default=None, help="Crop directory")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--size", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(handler=commands.cmd_preprocess)

    p = sub.add_parser("split", help="Assign train/val/test per class")
    p.add_argument("--manifest", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--val", type=int, default=None, help="Validation images per class")
    p.add_argument("--test", type=int, default=None, help="Test images per class")
    p.add_argument("--config", default=None)
    p.set_defaults(handler=commands.cmd_split)

    p = sub.add_parser("train", help="Train one run (or all) from a suite file")
    p.add_argument("--config", required=True)
    p.add_argument("--run", required=True, help="Run name in the suite, or 'all'")
    p.add_argument("--epochs", type=int, default=None, help="Override epochs_max")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--device", default=None)
    p.add_argument("--full-scale", action="store_true", help="Allow suites marked full_scale")
    p.set_defaults(handler=commands.cmd_train)

    p = sub.add_parser("eval", help="Evaluate a run's best checkpoint")
    p.add_argument("--run", required=True, help="Run directory")
    p.add_argument("--split", choices=["val", "test", "both"], default="test")
    p.add_argument("--manifest", default=None, help="Defaults to the manifest the run trained on")
    p.set_defaults(handler=commands.cmd_eval)

    p = sub.add_parser("report", help="Render the comparison table for evaluated runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="report")
    p.add_argument("--force", action="store_true", help="Combine runs evaluated on different data")
    p.set_defaults(handler=commands.cmd_report)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level or settings.LOG_LEVEL)
    try:
        return args.handler(args)
    except CatReidError as e:
        logger.debug(f"{args.command} failed", exc_info=True)
        print(f"catreid {args.command}: {e.detail}", file=sys.stderr)
        return e.exit_code
    except ValidationError as e:
        print(f"catreid {args.command}: invalid configuration: {describe_validation_error(e)}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
