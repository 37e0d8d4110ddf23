from pathlib import Path
from typing import List, Optional, Sequence
import argparse
import asyncio
import logging
import sys

from pydantic import ValidationError

from app import __version__
from app.config import settings
from app.exceptions import ConfigError, SpectralError
from app.models import Report
from app.services.experiment_service import ExperimentService
from app.utils.config_io import load_config, read_json, write_json

# Configure logging
logging.basicConfig(
    level=getattr(logging, settings.log_level.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_COMPARISON = 1
EXIT_INPUT = 2
EXIT_NUMERICAL = 3


def parse_seeds(raw: Optional[str]) -> Optional[List[int]]:
    if raw is None:
        return None
    try:
        seeds = [int(part) for part in raw.replace("[", "").replace("]", "").split(",") if part.strip()]
    except ValueError as e:
        raise ConfigError(f"--seeds must be a comma-separated list of integers, got {raw!r}") from e
    if not seeds:
        raise ConfigError("--seeds is empty")
    return seeds


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernel-spectral-rmt",
        description="Random matrix predictions for kernel spectral clustering, with Monte Carlo checks",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    commands = parser.add_subparsers(dest="command", required=True)

    def common(sub):
        sub.add_argument("--config", help="JSON experiment configuration")
        sub.add_argument("--out", default="out", help="output directory")
        sub.add_argument("--seeds", help="comma-separated seeds, overrides run.seeds")
        sub.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                         help="dotted config override, value parsed as JSON (repeatable)")

    common(commands.add_parser("analyze", help="theory only"))
    common(commands.add_parser("simulate", help="theory, Monte Carlo trials and comparisons"))
    for name, text in (("cluster", "spectral clustering of a dataset"), ("optimize-kernel", "kernel grid search")):
        sub = commands.add_parser(name, help=text)
        common(sub)
        sub.add_argument("--dataset", help="CSV, one sample per row; a synthetic sample of the model otherwise")
    plot = commands.add_parser("plotdata", help="CSV plot data from a report")
    common(plot)
    plot.add_argument("--report", required=True, help="report.json written by simulate or analyze")
    return parser


def run(args: argparse.Namespace, service: ExperimentService) -> int:
    if args.command == "plotdata":
        report = read_json(args.report)
        bins = "fd"
        if args.config:
            bins = load_config(args.config, args.override).run.histogram_bins
        written = service.plotdata(report, Path(args.out), bins)
        logger.info(f"Wrote {len(written)} plot data files to {args.out}")
        return EXIT_OK

    overrides = list(args.override)
    seeds = parse_seeds(args.seeds)
    if seeds is not None:
        overrides.append(f"run.seeds={seeds}")
    config = load_config(args.config, overrides)

    if args.command == "analyze":
        report = service.analyze(config)
    elif args.command == "simulate":
        report = asyncio.run(service.simulate(config))
    elif args.command == "cluster":
        report = service.cluster(config, args.dataset)
    else:
        report = asyncio.run(service.optimize_kernel(config, args.dataset))

    write_json(Path(args.out) / "report.json", report)
    return exit_code(report)


def exit_code(report: Report) -> int:
    failed = [entry for entry in report.comparison if not entry.passed]
    for entry in failed:
        logger.warning(
            f"Comparison failed: {entry.name} ({entry.reference}): |{entry.empirical} - {entry.theory}| "
            f"= {entry.discrepancy} > {entry.tolerance}"
        )
    return EXIT_COMPARISON if failed else EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        logger.info(f"Running command: {args.command}")
        return run(args, ExperimentService())
    except ValidationError as e:
        logger.error(f"Invalid input: {e}")
        return EXIT_INPUT
    except SpectralError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}", exc_info=True)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
