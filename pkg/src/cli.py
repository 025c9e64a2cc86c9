import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

from src.errors import ConfigError, NumericalError
from src.constants import ExitCode
from src.analysis import RUNNERS, run_experiment
from src.data_loader import load_config
from src.plotting import PLOT_KINDS, PlotSpec, emit_plots, load_tables

logger = logging.getLogger(__name__)

LOG_FORMAT: str = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _add_verbose(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging (default: info).")


def _add_run_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, required=True, help="Experiment config (JSON).")
    _add_verbose(parser)
    parser.add_argument("--seed", type=int, default=None, help="Overrides the config seed.")
    parser.add_argument("--out", type=Path, default=None, help="Overrides the output directory.")
    parser.add_argument("--workers", type=int, default=None, help="Worker processes for sweeps.")
    parser.add_argument(
        "--format", choices=["csv", "json"], default=None, help="Table format (default: config)."
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Adaptive traders choosing between two double-auction markets."
    )
    commands = parser.add_subparsers(dest="command", required=True)
    for kind in RUNNERS:
        _add_run_arguments(commands.add_parser(kind, help=f"Run a {kind} experiment."))

    plot = commands.add_parser("plot", help="Render figures from emitted tables.")
    plot.add_argument("--kind", choices=PLOT_KINDS, required=True)
    _add_verbose(plot)
    plot.add_argument(
        "--input", action="append", default=[], metavar="ROLE=PATH", required=True,
        help="Table for one role of the figure, e.g. field=flow_field.csv.",
    )
    plot.add_argument("--reference", type=float, nargs="*", default=[], help="Reference lines.")
    plot.add_argument("--axes", nargs=2, default=None, help="Phase-diagram axes.")
    plot.add_argument("--name", default=None, help="File stem (default: the kind).")
    plot.add_argument("--out", type=Path, default=Path("."), help="Output directory.")
    return parser


def _parse_inputs(items: List[str]) -> Dict[str, Path]:
    inputs = {}
    for item in items:
        role, sep, path = item.partition("=")
        if not sep or not role or not path:
            raise ConfigError("invalid plot input", [f"--input: {item!r} is not ROLE=PATH"])
        inputs[role] = Path(path)
    return inputs


def _plot(args: argparse.Namespace) -> int:
    inputs = _parse_inputs(args.input)
    spec = PlotSpec(
        kind=args.kind,
        name=args.name or args.kind,
        tables={role: role for role in inputs},
        references=tuple(args.reference),
        axes=tuple(args.axes or ()),
    )
    emit_plots(load_tables(inputs), [spec], args.out)
    return ExitCode.OK


def _run(args: argparse.Namespace) -> int:
    config, digest = load_config(args.config)
    if config.kind != args.command:
        raise ConfigError(
            "config kind does not match the subcommand",
            [f"kind: {config.kind!r}, subcommand: {args.command!r}"],
        )
    if args.workers is not None and args.workers < 1:
        raise ConfigError("invalid worker count", [f"--workers: {args.workers}"])
    manifest = run_experiment(config, digest, args.out, args.seed, args.workers, args.format)
    if manifest.failures:
        logger.warning("completed with %d failures", manifest.failures)
        return ExitCode.PARTIAL
    return ExitCode.OK


def main(argv: Optional[List[str]] = None) -> int:
    """
    Parses the command line, runs one subcommand and maps failures onto
    exit codes: 2 for configuration, 3 for numerical and 4 for I/O errors,
    5 when a run completed with a failure ledger.
    """
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.INFO
    logging.basicConfig(format=LOG_FORMAT)
    logging.getLogger().setLevel(level)
    try:
        if args.command == "plot":
            return _plot(args)
        return _run(args)
    except ConfigError as error:
        logger.error("%s", error)
        for problem in error.problems:
            logger.error("  %s", problem)
        return ExitCode.CONFIG
    except NumericalError as error:
        logger.error("numerical failure: %s", error)
        return ExitCode.NUMERICAL
    except OSError as error:
        logger.error("I/O failure: %s", error)
        return ExitCode.IO
