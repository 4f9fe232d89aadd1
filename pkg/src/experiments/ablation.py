"""Side-by-side comparison of model variants along one design axis."""

import re
from pathlib import Path
from typing import Literal

import pandas as pd
from structlog import get_logger

from src.core.config import ExperimentConfig, with_overrides
from src.data.dataset import ReidDataset
from src.evaluation.evaluator import evaluate
from src.training.trainer import Trainer

logger = get_logger()

Axis = Literal["dabn", "attention", "scales"]
AXES: tuple[Axis, ...] = ("dabn", "attention", "scales")


def ablation_variants(config: ExperimentConfig, axis: Axis) -> list[tuple[str, dict[str, str]]]:
    """(row label, config overrides) for every variant of ``axis``.

    ``dabn`` compares invariant-stream normalizations and is scored on the DI
    stream; ``attention`` compares expert aggregations on the DS stream;
    ``scales`` compares the last two backbone stages alone and together.
    """
    if axis == "dabn":
        fusion = {"EVALUATION__FUSION": "di"}
        return [
            ("Average Pooling", {"BACKBONE__NORM_MODE": "average", **fusion}),
            ("BN", {"BACKBONE__NORM_MODE": "plain", **fusion}),
            ("DABN", {"BACKBONE__NORM_MODE": "adaptive", **fusion}),
        ]
    if axis == "attention":
        fusion = {"EVALUATION__FUSION": "ds"}
        return [
            ("Average Pooling", {"MATCHING__AGGREGATION": "average", **fusion}),
            ("Voting", {"MATCHING__AGGREGATION": "voting", **fusion}),
            ("MSDA-QAConv", {"MATCHING__AGGREGATION": "attention", **fusion}),
        ]
    if axis == "scales":
        last = config.backbone.num_stages - 1
        return [
            (f"stage {last - 1} only", {"MATCHING__SCALES": str(last - 1)}),
            (f"stage {last} only", {"MATCHING__SCALES": str(last)}),
            ("both", {"MATCHING__SCALES": f"{last - 1},{last}"}),
        ]
    raise ValueError(f"Unknown ablation axis {axis!r}; expected one of {AXES}")


def _slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", label.lower()).strip("_")


def run_ablation(
    config: ExperimentConfig,
    axis: Axis,
    training_set: ReidDataset,
    query: ReidDataset,
    gallery: ReidDataset,
    output_dir: str | Path,
) -> pd.DataFrame:
    """Train and evaluate every variant with the same seed and data.

    Writes ``ablation_<axis>.csv``, ``.json`` and ``.txt`` to ``output_dir``
    and returns the table.
    """
    output_dir = Path(output_dir)
    rows = []
    for label, overrides in ablation_variants(config, axis):
        variant = with_overrides(config, overrides)
        run_dir = output_dir / f"ablation_{axis}" / _slug(label)
        logger.info("Running ablation variant", axis=axis, variant=label, seed=variant.seed)

        checkpoint = Trainer(variant, training_set, run_dir).fit()
        _, report = evaluate(checkpoint, query, gallery, output_dir=run_dir)
        rows.append(
            {
                "variant": label,
                "seed": variant.seed,
                "fusion": report.fusion,
                "mAP": report.mean_ap,
                **report.cmc,
            }
        )

    table = pd.DataFrame(rows)
    table.to_csv(output_dir / f"ablation_{axis}.csv", index=False)
    table.to_json(output_dir / f"ablation_{axis}.json", orient="records", indent=2)
    (output_dir / f"ablation_{axis}.txt").write_text(
        table.to_string(index=False, float_format=lambda v: f"{v:.4f}") + "\n", encoding="utf-8"
    )
    logger.info("Ablation finished", axis=axis, variants=len(rows))
    return table
