"""Score fusion and retrieval metrics (mAP and CMC)."""

from dataclasses import dataclass, field

import numpy as np
from structlog import get_logger

from src.core.config import FusionMode
from src.core.errors import DataError

logger = get_logger()


def standardize(scores: np.ndarray) -> np.ndarray:
    """Zero mean and unit variance over the whole matrix; a constant matrix only loses its mean."""
    scores = np.asarray(scores, dtype=np.float64)
    centered = scores - scores.mean()
    std = scores.std()
    return centered / std if std > 0 else centered


def fuse_scores(
    ds_scores: np.ndarray | None,
    di_scores: np.ndarray | None,
    mode: FusionMode = "sum",
    standardize_streams: bool = True,
) -> np.ndarray:
    """Combine the two streams' Q x G score matrices.

    ``sum`` adds the streams (standardized first unless disabled); ``ds`` and
    ``di`` pass a single stream through unchanged.
    """
    if mode == "ds":
        if ds_scores is None:
            raise ValueError("fusion=ds needs DS-stream scores")
        return np.asarray(ds_scores, dtype=np.float64)
    if mode == "di":
        if di_scores is None:
            raise ValueError("fusion=di needs DI-stream scores")
        return np.asarray(di_scores, dtype=np.float64)
    if mode != "sum":
        raise ValueError(f"Unknown fusion mode {mode!r}")
    if ds_scores is None or di_scores is None:
        raise ValueError("fusion=sum needs both streams")

    ds_scores, di_scores = np.asarray(ds_scores), np.asarray(di_scores)
    if ds_scores.shape != di_scores.shape:
        raise ValueError(f"Score shapes differ: {ds_scores.shape} vs {di_scores.shape}")
    if standardize_streams:
        return standardize(ds_scores) + standardize(di_scores)
    return ds_scores.astype(np.float64) + di_scores.astype(np.float64)


def rank_gallery(scores: np.ndarray) -> np.ndarray:
    """Gallery indices per query, best first; equal scores keep gallery order."""
    return np.argsort(-np.asarray(scores), axis=1, kind="stable")


@dataclass
class RankingResult:
    """Ranked galleries and the aggregate retrieval metrics.

    ``cmc[k - 1]`` is the fraction of evaluated queries with a valid positive
    in the top k after camera exclusion.
    """

    order: np.ndarray  # [Q, G] gallery indices, best first
    scores: np.ndarray  # [Q, G] fused scores
    average_precision: np.ndarray  # [Q], NaN for excluded queries
    cmc: np.ndarray
    mean_ap: float
    num_valid: int
    num_excluded: int
    excluded: list[int] = field(default_factory=list)

    def top_k(self, k: int) -> float:
        if k < 1:
            raise ValueError("k must be >= 1")
        if len(self.cmc) == 0:
            return 0.0
        return float(self.cmc[min(k, len(self.cmc)) - 1])


def compute_map_cmc(
    scores: np.ndarray,
    query_pids: np.ndarray,
    gallery_pids: np.ndarray,
    query_camids: np.ndarray,
    gallery_camids: np.ndarray,
) -> RankingResult:
    """mAP and CMC with same-identity same-camera gallery entries removed per query.

    AP is the mean of the precision at the rank of every valid positive.
    Queries without any valid positive are excluded and reported.
    """
    scores = np.asarray(scores, dtype=np.float64)
    num_query, num_gallery = scores.shape
    if len(query_pids) != num_query or len(gallery_pids) != num_gallery:
        raise ValueError("Label counts do not match the score matrix")

    order = rank_gallery(scores)
    ranked_pids = np.asarray(gallery_pids)[order]
    ranked_cams = np.asarray(gallery_camids)[order]
    query_pids = np.asarray(query_pids)[:, None]
    query_camids = np.asarray(query_camids)[:, None]

    matches = ranked_pids == query_pids
    junk = matches & (ranked_cams == query_camids)

    average_precision = np.full(num_query, np.nan)
    cmc_sum = np.zeros(num_gallery)
    excluded = []
    for q in range(num_query):
        hits = matches[q][~junk[q]]
        if not hits.any():
            excluded.append(q)
            continue
        positions = np.flatnonzero(hits)
        average_precision[q] = np.mean(np.arange(1, len(positions) + 1) / (positions + 1))
        cmc_sum[positions[0] :] += 1

    num_valid = num_query - len(excluded)
    if num_valid == 0:
        raise DataError("No query has a valid positive in the gallery")
    if excluded:
        logger.warning("Queries without valid positives excluded", count=len(excluded))

    return RankingResult(
        order=order,
        scores=scores,
        average_precision=average_precision,
        cmc=cmc_sum / num_valid,
        mean_ap=float(np.nanmean(average_precision)),
        num_valid=num_valid,
        num_excluded=len(excluded),
        excluded=excluded,
    )
