import argparse
import json
import logging
import sys
from typing import List, Optional

from app.core.config import settings
from app.core.exceptions import AssertionFailed, ConfigInvalid, LabError
from app.services.experiment_service import list_scenarios, run_experiment

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
)
logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m app.main",
                                     description=f"{settings.PROJECT_NAME} {settings.VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run the scenario named in a JSON config")
    run.add_argument("config", help="path to the experiment config")
    run.add_argument("--out", default=None, help="output directory (overrides OUTPUT_DIR)")
    run.add_argument("--seed", type=int, default=None, help="seed for randomized probes")
    run.add_argument("--threads", type=int, default=None, help="worker threads for block assembly")

    listing = commands.add_parser("list", help="list the available scenarios")
    listing.add_argument("--json", action="store_true", help="print a JSON array")
    return parser


def run_command(args: argparse.Namespace) -> int:
    try:
        artifacts = run_experiment(args.config, output_dir=args.out, seed=args.seed, threads=args.threads)
    except ConfigInvalid as e:
        logger.error(f"Config rejected: {str(e)}")
        print(f"error: {e.message}", file=sys.stderr)
        return 2
    except AssertionFailed as e:
        logger.error(f"Run failed: {str(e)}")
        print(f"FAILED: {e.message}", file=sys.stderr)
        return 1
    except LabError as e:
        logger.error(f"Run aborted: {str(e)}")
        print(f"FAILED: {type(e).__name__}: {e.message}", file=sys.stderr)
        return 1
    print(f"{artifacts.scenario}: all checks passed; {len(artifacts.files)} files in {artifacts.output_dir}")
    return 0


def list_command(args: argparse.Namespace) -> int:
    scenarios = list_scenarios()
    if args.json:
        print(json.dumps([info.model_dump() for info in scenarios], indent=2))
        return 0
    width = max(len(info.name) for info in scenarios)
    for info in scenarios:
        print(f"{info.name:<{width}}  {info.dimensions:<28}  {info.runtime:>7}  {info.description}")
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on usage errors and 0 on --help
        return int(e.code or 0)
    if args.command == "run":
        return run_command(args)
    return list_command(args)


if __name__ == "__main__":
    sys.exit(main())
