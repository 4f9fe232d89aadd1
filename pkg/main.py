#!/usr/bin/env python3
"""Main CLI interface for two-stream domain-generalizable person re-identification."""

import argparse
import sys
from pathlib import Path

import torch
from structlog import get_logger

# Add src to path
sys.path.insert(0, str(Path(__file__).parent))

from src.core import (
    ExperimentConfig,
    RuntimeSettings,
    TalError,
    exit_code_for,
    load_config,
    parse_overrides,
)
from src.core.logging_config import setup_logging
from src.experiments import AXES
from src.pipeline import EFFECTIVE_CONFIG, ExperimentPipeline

logger = get_logger()


class CliParser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with status 1."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(1, f"✗ {message}\n")


def build_config(args) -> ExperimentConfig:
    """Config file plus ``--set`` overrides plus dedicated flags.

    Without ``--config`` the run's own effective config is reused when present.
    """
    path = args.config
    if path is None and (args.output_dir / EFFECTIVE_CONFIG).is_file():
        path = args.output_dir / EFFECTIVE_CONFIG
    overrides = parse_overrides(args.set or [])
    if args.seed is not None:
        overrides["SEED"] = str(args.seed)
        overrides["DATA__SYNTHETIC__SEED"] = str(args.seed)
    return load_config(path, overrides)


def gen_data(args, pipeline: ExperimentPipeline) -> None:
    """Render the synthetic multi-domain dataset."""
    paths = pipeline.generate_data(force=args.force)
    print(f"✓ Wrote {len(paths)} datasets under {pipeline.data_root}")
    for path in paths:
        print(f"  - {path}")


def train(args, pipeline: ExperimentPipeline) -> None:
    """Run the three-phase training schedule."""
    checkpoint = pipeline.train(resume=args.resume, force=args.force)
    print(f"✓ Training finished; checkpoint at {checkpoint}")


def evaluate(args, pipeline: ExperimentPipeline) -> None:
    """Evaluate a checkpoint on the held-out domain."""
    report = pipeline.evaluate(
        checkpoint=args.checkpoint,
        fusion=args.fusion,
        per_query=args.per_query,
        grid_queries=args.grid,
        correspondences=args.correspondences,
    )
    print(f"\n📊 Evaluation ({report.fusion}):")
    print("=" * 50)
    print(report.render_text())


def ablate(args, pipeline: ExperimentPipeline) -> None:
    """Train and evaluate every variant along one ablation axis."""
    table = pipeline.ablate(args.axis)
    print(f"\n📊 Ablation: {args.axis}")
    print("=" * 50)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))


def add_common_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="Flat KEY=VALUE experiment config file")
    parser.add_argument(
        "--output-dir", type=Path, default=Path("runs/default"), help="Base for all paths"
    )
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="Override a config value, e.g. --set TRAIN__EPOCHS=5 (repeatable)",
    )
    parser.add_argument("--seed", type=int, help="Override SEED and the synthetic data seed")
    parser.add_argument("--data", type=Path, help="Dataset root (default: DATA__ROOT)")


def build_parser() -> argparse.ArgumentParser:
    parser = CliParser(
        description="Two-stream adaptive learning for domain-generalizable person re-id",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  # Generate the synthetic source and held-out domains
  %(prog)s gen-data --config configs/smoke.env --output-dir runs/smoke

  # Train, then resume an interrupted run
  %(prog)s train --config configs/smoke.env --output-dir runs/smoke
  %(prog)s train --config configs/smoke.env --output-dir runs/smoke --resume

  # Evaluate the fused streams and a single stream
  %(prog)s eval --output-dir runs/smoke
  %(prog)s eval --output-dir runs/smoke --fusion di --per-query

  # Compare invariant-stream normalizations
  %(prog)s ablate --config configs/smoke.env --output-dir runs/smoke --axis dabn
        """,
    )
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    gen_parser = subparsers.add_parser("gen-data", help="Generate the synthetic dataset")
    add_common_arguments(gen_parser)
    gen_parser.add_argument("--force", action="store_true", help="Overwrite existing data")
    gen_parser.set_defaults(func=gen_data)

    train_parser = subparsers.add_parser("train", help="Train the two-stream model")
    add_common_arguments(train_parser)
    resume_group = train_parser.add_mutually_exclusive_group()
    resume_group.add_argument("--resume", action="store_true", help="Continue from last checkpoint")
    resume_group.add_argument("--force", action="store_true", help="Start over in a used directory")
    train_parser.set_defaults(func=train)

    eval_parser = subparsers.add_parser("eval", help="Evaluate a checkpoint")
    add_common_arguments(eval_parser)
    eval_parser.add_argument(
        "--checkpoint", type=Path, help="Checkpoint (default: checkpoints/last.pt)"
    )
    eval_parser.add_argument(
        "--fusion", choices=["sum", "ds", "di"], help="Stream fusion (default: from checkpoint)"
    )
    eval_parser.add_argument("--per-query", action="store_true", help="Write per-query rankings")
    eval_parser.add_argument("--grid", type=int, default=0, help="Ranking grids for N queries")
    eval_parser.add_argument(
        "--correspondences", type=int, default=0, help="Correspondence maps for N top-1 pairs"
    )
    eval_parser.set_defaults(func=evaluate)

    ablate_parser = subparsers.add_parser("ablate", help="Run an ablation axis")
    add_common_arguments(ablate_parser)
    ablate_parser.add_argument("--axis", required=True, choices=AXES, help="Ablation axis")
    ablate_parser.set_defaults(func=ablate)

    return parser


def main(argv: list[str] | None = None) -> int:
    """Main CLI entry point."""
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return 1

    settings = RuntimeSettings()
    setup_logging(settings.log_level, args.output_dir / settings.log_file)
    torch.set_num_threads(settings.torch_threads)

    try:
        config = build_config(args)
        pipeline = ExperimentPipeline(config, args.output_dir, data_root=args.data)
        args.func(args, pipeline)
    except TalError as e:
        logger.error("Command failed", command=args.command, error=str(e))
        print(f"✗ {e}")
        return exit_code_for(e)
    except Exception as e:
        logger.exception("Command crashed", command=args.command, error=str(e))
        print(f"✗ {args.command} failed: {e}")
        return exit_code_for(e)
    return 0


if __name__ == "__main__":
    sys.exit(main())
