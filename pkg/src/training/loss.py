"""Batch-hard triplet loss on similarity scores."""

from dataclasses import dataclass
from typing import Literal

import torch
import torch.nn.functional as F
from torch import Tensor, nn

Reduction = Literal["sum", "mean"]


@dataclass
class LabeledSimilarityBatch:
    """B x B scores between batch members with their identity labels."""

    scores: Tensor
    labels: Tensor
    margin: float

    def __post_init__(self) -> None:
        if self.scores.dim() != 2 or self.scores.shape[0] != self.scores.shape[1]:
            raise ValueError(f"Scores must be square [B, B], got {tuple(self.scores.shape)}")
        if self.labels.shape != (self.scores.shape[0],):
            raise ValueError(
                f"Expected {self.scores.shape[0]} labels, got shape {tuple(self.labels.shape)}"
            )
        if self.margin <= 0:
            raise ValueError(f"Margin must be positive, got {self.margin}")


@dataclass
class TripletResult:
    loss: Tensor
    per_anchor: Tensor  # [B] hinge values
    hardest_positive: Tensor  # [B] column index per anchor
    hardest_negative: Tensor

    @property
    def active_fraction(self) -> float:
        """Share of anchors whose hinge is still positive."""
        return float((self.per_anchor > 0).float().mean())


def _first_index(values: Tensor, target: Tensor, mask: Tensor) -> Tensor:
    """Lowest column index per row where ``values`` equals ``target`` inside ``mask``."""
    columns = torch.arange(values.shape[1], device=values.device).expand_as(values)
    hit = mask & (values == target[:, None])
    return torch.where(hit, columns, values.shape[1]).min(dim=1).values


def batch_hard_triplet(batch: LabeledSimilarityBatch, reduction: Reduction = "sum") -> TripletResult:
    """Hardest positive and hardest negative per anchor, hinged at the margin.

    For anchor a: loss_a = max(0, m - min_{p != a, y_p = y_a} S_ap + max_{y_n != y_a} S_an).
    Ties go to the lowest column index, so gradients reach exactly one
    positive and one negative per anchor.
    """
    scores, labels = batch.scores, batch.labels
    size = scores.shape[0]
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(size, dtype=torch.bool, device=scores.device)
    positives = same & ~eye
    negatives = ~same
    if not bool(positives.any(dim=1).all()):
        raise ValueError("Every anchor needs at least one positive in the batch")
    if not bool(negatives.any(dim=1).all()):
        raise ValueError("Every anchor needs at least one negative in the batch")

    detached = scores.detach()
    pos_value = detached.masked_fill(~positives, float("inf")).min(dim=1).values
    neg_value = detached.masked_fill(~negatives, float("-inf")).max(dim=1).values
    pos_index = _first_index(detached, pos_value, positives)
    neg_index = _first_index(detached, neg_value, negatives)

    hardest_pos = scores.gather(1, pos_index[:, None]).squeeze(1)
    hardest_neg = scores.gather(1, neg_index[:, None]).squeeze(1)
    per_anchor = F.relu(batch.margin - hardest_pos + hardest_neg)
    loss = per_anchor.sum() if reduction == "sum" else per_anchor.mean()
    return TripletResult(loss, per_anchor, pos_index, neg_index)


class BatchHardTripletLoss(nn.Module):
    """Module form of :func:`batch_hard_triplet` with a fixed margin."""

    def __init__(self, margin: float, reduction: Reduction = "sum") -> None:
        super().__init__()
        if margin <= 0:
            raise ValueError(f"Margin must be positive, got {margin}")
        self.margin = margin
        self.reduction = reduction

    def forward(self, scores: Tensor, labels: Tensor) -> TripletResult:
        return batch_hard_triplet(LabeledSimilarityBatch(scores, labels, self.margin), self.reduction)
