"""Command-line entry point for CAGP experiments.

Usage:
    python -m cagp.cli prepare --config configs/tiny.yaml
    python -m cagp.cli train   --config configs/tiny.yaml --seed 1
    python -m cagp.cli eval    --config configs/tiny.yaml --mode random_corruption
    python -m cagp.cli verify  --config configs/fb15k237.yaml --out runs/fb
    python -m cagp.cli ablate  --config configs/synthetic.yaml --set train.epochs=5
    python -m cagp.cli report  --config configs/tiny.yaml

Diagnostics go to stderr; stdout carries only the JSON result summary.
Exit codes: 0 success, 2 input error, 3 training diverged.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import yaml
from pydantic import ValidationError

from cagp import __version__
from cagp.config import settings
from cagp.errors import CagpError, InvalidInputError
from cagp.schemas.run_config import RunConfig

logger = logging.getLogger("cagp.cli")

COMMANDS = {
    "prepare": "Load the graph, write stats, coverage and OOD partitions",
    "train": "Train Gaussian entity embeddings and write a checkpoint",
    "eval": "Evaluate every uncertainty signal on one OOD protocol",
    "verify": "Measure assumptions A1-A6 and AUROC by OOD type",
    "ablate": "Coverage-mode, mixing, tau and A3 ablations",
    "report": "Collect evaluation results into one summary table",
}


def configure_logging() -> None:
    logging.basicConfig(
        stream=sys.stderr,
        level=settings.LOG_LEVEL.upper(),
        format=settings.LOG_FORMAT,
        force=True,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cagp", description="Coverage-augmented uncertainty for KG embeddings"
    )
    parser.add_argument("--version", action="version", version=f"cagp {__version__}")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    for name, help_text in COMMANDS.items():
        sub = subparsers.add_parser(name, help=help_text)
        sub.add_argument("--config", required=True, type=Path, help="Run config YAML file")
        sub.add_argument("--out", type=Path, default=None, help="Override output_dir")
        sub.add_argument("--seed", type=int, default=None, help="Set every named seed")
        sub.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a config value, e.g. train.epochs=5 (repeatable)",
        )
        if name == "eval":
            sub.add_argument(
                "--mode",
                choices=["temporal_like", "random_corruption"],
                default="temporal_like",
                help="OOD protocol (default: temporal_like)",
            )
    return parser


def load_config(args: argparse.Namespace) -> RunConfig:
    """YAML file, then --set overrides, then --out / --seed."""
    config = RunConfig.from_yaml(args.config, args.overrides)
    if args.out is not None:
        config = config.model_copy(update={"output_dir": args.out})
    if args.seed is not None:
        if args.seed < 0:
            raise InvalidInputError(f"--seed must be non-negative, got {args.seed}")
        config = config.with_seed(args.seed)
    return config


def run_command(args: argparse.Namespace, config: RunConfig) -> dict:
    # Import here so --help does not pay for torch
    from cagp.services import experiments

    if args.command == "prepare":
        return experiments.prepare(config)
    if args.command == "train":
        return experiments.train_model(config)
    if args.command == "eval":
        return experiments.evaluate(config, args.mode)
    if args.command == "verify":
        return experiments.verify(config)
    if args.command == "ablate":
        return experiments.ablate(config)
    return experiments.report(config)


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2

    configure_logging()
    try:
        config = load_config(args)
        summary = run_command(args, config)
    except (ValidationError, yaml.YAMLError) as exc:
        logger.error("Invalid config %s", args.config)
        print(f"Error: invalid config {args.config}: {exc}", file=sys.stderr)
        return 2
    except CagpError as exc:
        if exc.exit_code == 0:
            logger.warning("%s", exc.message)
            print(f"Warning: {exc.message}", file=sys.stderr)
            return 0
        logger.error("%s failed: %s", args.command, exc.message)
        print(f"Error: {exc.message}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        logger.error("%s failed: %s", args.command, exc)
        print(f"Error: {exc}", file=sys.stderr)
        return 2

    from cagp.services.artifacts import to_jsonable

    print(json.dumps(to_jsonable(summary), indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
