"""End-to-end evaluation of a checkpoint on a held-out query/gallery split."""

from pathlib import Path

import numpy as np
import pandas as pd
import torch
from PIL import Image, ImageDraw
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import expit
from structlog import get_logger

from src.core.config import ExperimentConfig, FusionMode, config_hash
from src.core.errors import ConfigError
from src.data.dataset import ReidDataset
from src.data.transforms import BatchBuilder
from src.models.matching import dump_correspondences
from src.models.tal import LabeledImages, SimilarityMatrix, TwoStreamModel, pairwise_scores
from src.training.checkpoint import load_model

from .metrics import RankingResult, compute_map_cmc, fuse_scores

logger = get_logger()

MATCH_COLOUR = (40, 170, 60)
MISS_COLOUR = (200, 40, 40)
JUNK_COLOUR = (128, 128, 128)


class EvaluationReport(BaseModel):
    """Machine-readable evaluation summary."""

    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    config_hash: str
    fusion: FusionMode
    standardize: bool
    num_query: int = Field(ge=0)
    num_gallery: int = Field(ge=0)
    num_valid_queries: int = Field(ge=0)
    num_excluded_queries: int = Field(ge=0)
    mean_ap: float = Field(ge=0, le=1)
    cmc: dict[str, float]

    def to_frame(self) -> pd.DataFrame:
        rows = [("mAP", self.mean_ap), *self.cmc.items()]
        return pd.DataFrame(rows, columns=["metric", "value"])

    def render_text(self) -> str:
        header = [
            f"checkpoint: {self.checkpoint}",
            f"fusion: {self.fusion} (standardize={str(self.standardize).lower()})",
            f"queries: {self.num_valid_queries} evaluated, {self.num_excluded_queries} excluded",
            f"gallery: {self.num_gallery}",
            "",
        ]
        table = self.to_frame().to_string(index=False, float_format=lambda v: f"{v:.4f}")
        return "\n".join(header) + table + "\n"


def labeled_images(dataset: ReidDataset, builder: BatchBuilder) -> LabeledImages:
    return LabeledImages(builder.all(), dataset.pids, dataset.camids, dataset.domains)


def stream_scores(
    model: TwoStreamModel,
    query: LabeledImages,
    gallery: LabeledImages,
    fusion: FusionMode,
    batch_size: int,
) -> dict[str, SimilarityMatrix]:
    """Score matrices of every stream the fusion mode needs."""
    streams = ["ds", "di"] if fusion == "sum" else [fusion]
    return {s: pairwise_scores(model, query, gallery, s, batch_size) for s in streams}


def build_report(
    result: RankingResult,
    config: ExperimentConfig,
    checkpoint: str | Path,
    fusion: FusionMode,
) -> EvaluationReport:
    ranks = config.evaluation.ranks
    return EvaluationReport(
        checkpoint=str(checkpoint),
        config_hash=config_hash(config),
        fusion=fusion,
        standardize=config.evaluation.standardize,
        num_query=result.scores.shape[0],
        num_gallery=result.scores.shape[1],
        num_valid_queries=result.num_valid,
        num_excluded_queries=result.num_excluded,
        mean_ap=result.mean_ap,
        cmc={f"top{k}": result.top_k(k) for k in ranks},
    )


def write_report(report: EvaluationReport, output_dir: str | Path) -> tuple[Path, Path]:
    """``report_<fusion>.json`` and ``report_<fusion>.txt`` in ``output_dir``."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    json_path = output_dir / f"report_{report.fusion}.json"
    text_path = output_dir / f"report_{report.fusion}.txt"
    json_path.write_text(report.model_dump_json(indent=2) + "\n", encoding="utf-8")
    text_path.write_text(report.render_text(), encoding="utf-8")
    return json_path, text_path


def ranking_table(
    result: RankingResult, query: ReidDataset, gallery: ReidDataset, top_k: int = 10
) -> pd.DataFrame:
    """One row per query: labels, AP, first correct rank and the top-k gallery entries.

    Scores are mapped through a sigmoid so they read as match confidences.
    """
    top_k = min(top_k, result.order.shape[1])
    gallery_pids, gallery_camids = gallery.pids, gallery.camids
    rows = []
    for q, order in enumerate(result.order):
        hits = np.flatnonzero(
            (gallery_pids[order] == query.pids[q]) & (gallery_camids[order] != query.camids[q])
        )
        rows.append(
            {
                "query_index": q,
                "query_pid": int(query.pids[q]),
                "query_camid": int(query.camids[q]),
                "average_precision": result.average_precision[q],
                "first_match_rank": int(hits[0]) + 1 if len(hits) else -1,
                "top_gallery": " ".join(str(int(g)) for g in order[:top_k]),
                "top_confidence": " ".join(
                    f"{v:.4f}" for v in expit(result.scores[q, order[:top_k]])
                ),
            }
        )
    return pd.DataFrame(rows)


def save_ranking_grid(
    result: RankingResult,
    query: ReidDataset,
    gallery: ReidDataset,
    query_builder: BatchBuilder,
    gallery_builder: BatchBuilder,
    output_dir: str | Path,
    num_queries: int,
    top_k: int = 5,
) -> list[Path]:
    """One strip per query: the query image then its top-k gallery images.

    Borders mark correct matches green, wrong ones red and same-camera
    duplicates of the query identity grey.
    """
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    height, width = query_builder.height, query_builder.width
    border = 3
    tile_w, tile_h = width + 2 * border, height + 2 * border
    paths = []
    for q in range(min(num_queries, len(query))):
        ranked = result.order[q][:top_k]
        canvas = Image.new("RGB", (tile_w * (len(ranked) + 1), tile_h), (255, 255, 255))
        draw = ImageDraw.Draw(canvas)
        canvas.paste(Image.fromarray(query_builder.image(q)), (border, border))
        for slot, g in enumerate(ranked, start=1):
            same_id = gallery.pids[g] == query.pids[q]
            if same_id and gallery.camids[g] == query.camids[q]:
                colour = JUNK_COLOUR
            else:
                colour = MATCH_COLOUR if same_id else MISS_COLOUR
            x0 = slot * tile_w
            draw.rectangle([x0, 0, x0 + tile_w - 1, tile_h - 1], fill=colour)
            canvas.paste(Image.fromarray(gallery_builder.image(int(g))), (x0 + border, border))
        path = output_dir / f"query_{q:04d}.png"
        canvas.save(path, format="PNG")
        paths.append(path)
    logger.info("Wrote ranking grids", directory=str(output_dir), queries=len(paths))
    return paths


@torch.no_grad()
def save_correspondences(
    model: TwoStreamModel,
    result: RankingResult,
    query: LabeledImages,
    gallery: LabeledImages,
    path: str | Path,
    num_pairs: int,
) -> Path:
    """Best-correspondence maps between the first queries and their top-1 gallery images.

    Uses the deepest matching scale of the invariant stream, or expert 0
    when the model has none.
    """
    count = min(num_pairs, len(query))
    pairs = [(q, int(result.order[q][0])) for q in range(count)]
    gallery_index = [g for _, g in pairs]
    scale = model.config.matching.scales[-1]

    def maps(images: torch.Tensor) -> torch.Tensor:
        if model.has_invariant_stream:
            return model.features(images, "di").maps[scale]
        return model.features(images, "ds")[0].maps[scale]

    query_maps = maps(query.images[:count])
    gallery_maps = maps(gallery.images[gallery_index])
    local_pairs = [(i, i) for i in range(count)]
    return dump_correspondences(query_maps, gallery_maps, local_pairs, path)


def evaluate(
    checkpoint: str | Path,
    query: ReidDataset,
    gallery: ReidDataset,
    fusion: FusionMode | None = None,
    output_dir: str | Path | None = None,
    per_query: bool = False,
    grid_queries: int = 0,
    correspondences: int = 0,
) -> tuple[RankingResult, EvaluationReport]:
    """Score a held-out split with a trained checkpoint.

    Args:
        checkpoint: training checkpoint path
        query: query split
        gallery: gallery split
        fusion: sum, ds or di; defaults to the checkpoint config's fusion mode
        output_dir: where reports go; None skips writing
        per_query: also write a per-query ranking CSV
        grid_queries: write ranking grid images for this many queries
        correspondences: dump correspondence maps for this many top-1 pairs

    Returns:
        Ranking result and its report
    """
    model, config = load_model(checkpoint)
    fusion = fusion or config.evaluation.fusion
    if fusion != "ds" and not model.has_invariant_stream:
        raise ConfigError(f"fusion={fusion} needs a domain-invariant stream; this model has none")

    logger.info(
        "Evaluating checkpoint",
        checkpoint=str(checkpoint),
        fusion=fusion,
        queries=len(query),
        gallery=len(gallery),
    )
    height, width = config.backbone.height, config.backbone.width
    query_builder = BatchBuilder(query, config.data, height, width)
    gallery_builder = BatchBuilder(gallery, config.data, height, width)
    query_images = labeled_images(query, query_builder)
    gallery_images = labeled_images(gallery, gallery_builder)

    matrices = stream_scores(model, query_images, gallery_images, fusion, config.evaluation.batch_size)
    fused = fuse_scores(
        matrices["ds"].scores if "ds" in matrices else None,
        matrices["di"].scores if "di" in matrices else None,
        fusion,
        config.evaluation.standardize,
    )
    result = compute_map_cmc(fused, query.pids, gallery.pids, query.camids, gallery.camids)
    report = build_report(result, config, checkpoint, fusion)
    logger.info("Evaluation finished", fusion=fusion, mean_ap=report.mean_ap, **report.cmc)

    if output_dir is not None:
        output_dir = Path(output_dir)
        write_report(report, output_dir)
        if per_query:
            table = ranking_table(result, query, gallery)
            table.to_csv(output_dir / f"ranking_{fusion}.csv", index=False)
        if grid_queries > 0:
            save_ranking_grid(
                result,
                query,
                gallery,
                query_builder,
                gallery_builder,
                output_dir / f"grids_{fusion}",
                grid_queries,
            )
        if correspondences > 0:
            save_correspondences(
                model,
                result,
                query_images,
                gallery_images,
                output_dir / f"correspondences_{fusion}.npz",
                correspondences,
            )
    return result, report
