"""Retrieval metrics, score fusion and checkpoint evaluation."""

from .evaluator import (
    EvaluationReport,
    evaluate,
    ranking_table,
    save_ranking_grid,
    stream_scores,
    write_report,
)
from .metrics import RankingResult, compute_map_cmc, fuse_scores, rank_gallery, standardize

__all__ = [
    "EvaluationReport",
    "RankingResult",
    "compute_map_cmc",
    "evaluate",
    "fuse_scores",
    "rank_gallery",
    "ranking_table",
    "save_ranking_grid",
    "standardize",
    "stream_scores",
    "write_report",
]
