"""Command-line entry point.

Usage:
    python -m src.cli table --config data/table.env --scale 0.01 --threads 4

Exit codes:
    0  success
    1  I/O failure
    2  configuration error
    3  numerical failure (solver, mesh, chain)
"""

import argparse
import logging
import sys

from src.cli.commands import run_experiment
from src.cli.experiment import ExperimentKind, load_experiment
from src.config import settings
from src.rmfem.errors import (
    ChainError,
    ConfigError,
    DegenerateSchemeError,
    MeshValidityError,
    SolverError,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_IO = 1
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

SUBCOMMANDS = {
    "forward-demo": ExperimentKind.FORWARD_DEMO,
    "posterior": ExperimentKind.POSTERIOR,
    "interpolation": ExperimentKind.INTERPOLATION,
    "energy": ExperimentKind.ENERGY,
    "table": ExperimentKind.TABLE,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rmfem", description="Random-mesh FEM Bayesian inversion experiments"
    )
    subparsers = parser.add_subparsers(dest="command", required=True)
    for name, kind in SUBCOMMANDS.items():
        sub = subparsers.add_parser(name, help=f"Run the {kind.value} experiment")
        sub.add_argument("--config", help="Flat KEY=value experiment file")
        sub.add_argument("--seed", type=int, help="Master seed")
        sub.add_argument("--out", dest="out_dir", help="Output directory")
        sub.add_argument("--scale", type=float, help="Multiply burn-in and sample counts")
        sub.add_argument("--threads", type=int, help="Worker threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(
        level=settings.log_level, format="%(asctime)s %(levelname)s %(name)s | %(message)s"
    )
    args = build_parser().parse_args(argv)
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "scale": args.scale,
        "threads": args.threads,
    }

    try:
        config = load_experiment(SUBCOMMANDS[args.command], args.config, overrides)
    except (ConfigError, ValueError) as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG
    except FileNotFoundError as e:
        logger.error(str(e))
        return EXIT_CONFIG

    logger.info(f"Running {config.experiment.value} | seed={config.seed} | out={config.out_dir}")
    try:
        written = run_experiment(config)
    except (SolverError, MeshValidityError, DegenerateSchemeError, ChainError) as e:
        logger.error(f"Numerical failure: {e}")
        return EXIT_NUMERICAL
    except OSError as e:
        logger.error(f"I/O failure: {e}")
        return EXIT_IO

    logger.info(f"Done | {len(written)} files written to {config.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
