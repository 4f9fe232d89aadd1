"""Query-adaptive local matching.

A query feature map is cut into 1x1 local patches, L2-normalized over
channels and used as convolution kernels on the gallery feature map. Global
max pooling over the resulting response maps gives, for every location, the
cosine similarity of its best local correspondence in the other image.
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from structlog import get_logger
from torch import Tensor, nn

from .backbone import FeatureMapSet

logger = get_logger()


@dataclass
class MatchKernelSet:
    """Unit-norm 1x1 kernels, one per query location, in row-major order."""

    kernels: Tensor  # [Hq * Wq, C]
    size: tuple[int, int]

    @property
    def num_kernels(self) -> int:
        return self.kernels.shape[0]


def normalize_locations(feature_map: Tensor) -> Tensor:
    """L2-normalize every spatial location over the channel axis of a [..., C, H, W] map."""
    return F.normalize(feature_map, p=2, dim=-3)


def build_kernels(query_map: Tensor) -> MatchKernelSet:
    """Re-organize a [C, H, W] query map into per-location correlation kernels."""
    if query_map.dim() != 3:
        raise ValueError(f"Expected a [C, H, W] map, got shape {tuple(query_map.shape)}")
    normed = normalize_locations(query_map)
    kernels = normed.flatten(1).t().contiguous()
    return MatchKernelSet(kernels, (query_map.shape[1], query_map.shape[2]))


def response_dim(height: int, width: int, bidirectional: bool = True) -> int:
    """Length of the response vector for two maps of the given spatial size."""
    return height * width * (2 if bidirectional else 1)


def pairwise_responses(
    query_maps: Tensor,
    gallery_maps: Tensor,
    bidirectional: bool = True,
    chunk_size: int = 16,
) -> Tensor:
    """Best-correspondence responses for every (query, gallery) pair.

    Args:
        query_maps: [Q, C, Hq, Wq] feature maps
        gallery_maps: [G, C, Hg, Wg] feature maps
        bidirectional: append gallery-side best responses after the query-side ones
        chunk_size: queries correlated per convolution call

    Returns:
        [Q, G, Hq*Wq (+ Hg*Wg)] responses in [-1, 1]
    """
    if query_maps.dim() != 4 or gallery_maps.dim() != 4:
        raise ValueError("query_maps and gallery_maps must be [N, C, H, W]")
    if query_maps.shape[1] != gallery_maps.shape[1]:
        raise ValueError(
            f"Channel mismatch: query has {query_maps.shape[1]}, gallery has {gallery_maps.shape[1]}"
        )
    num_query, channels = query_maps.shape[:2]
    num_gallery = gallery_maps.shape[0]
    query_len = query_maps.shape[2] * query_maps.shape[3]
    gallery_len = gallery_maps.shape[2] * gallery_maps.shape[3]

    queries = normalize_locations(query_maps).flatten(2)  # [Q, C, Lq]
    gallery = normalize_locations(gallery_maps)

    chunks = []
    for start in range(0, num_query, chunk_size):
        block = queries[start : start + chunk_size]
        kernels = block.permute(0, 2, 1).reshape(-1, channels, 1, 1)
        sim = F.conv2d(gallery, kernels)  # [G, q*Lq, Hg, Wg]
        sim = sim.view(num_gallery, block.shape[0], query_len, gallery_len).permute(1, 0, 2, 3)
        # max(dim) keeps only argmax indices for backward, not the similarity volume
        parts = [sim.max(dim=3).values]
        if bidirectional:
            parts.append(sim.max(dim=2).values)
        chunks.append(torch.cat(parts, dim=-1))
    return torch.cat(chunks, dim=0)


def qaconv_response(query_map: Tensor, gallery_map: Tensor, bidirectional: bool = True) -> Tensor:
    """Response vector for a single [C, H, W] pair: query-side maxima, then gallery-side maxima."""
    if query_map.dim() != 3 or gallery_map.dim() != 3:
        raise ValueError("qaconv_response expects two [C, H, W] maps")
    return pairwise_responses(query_map[None], gallery_map[None], bidirectional)[0, 0]


class SimilarityHead(nn.Module):
    """BN-FC-BN block reducing a response vector to one similarity score.

    The output BN has no affine parameters; scores are standardized and then
    multiplied by the fixed ``scale``, so the triplet margin is stated in units
    of that scale.
    """

    def __init__(self, response_dim: int, scale: float = 1.0) -> None:
        super().__init__()
        if scale <= 0:
            raise ValueError(f"Score scale must be positive, got {scale}")
        self.response_dim = response_dim
        self.scale = scale
        self.bn_in = nn.BatchNorm1d(1)
        self.fc = nn.Linear(response_dim, 1)
        self.bn_out = nn.BatchNorm1d(1, affine=False)

    def _standardize(self, x: Tensor) -> Tensor:
        # A single pair has no batch statistics; score it with the running ones
        use_batch = self.training and x.shape[0] > 1
        bn = self.bn_out
        return F.batch_norm(
            x,
            bn.running_mean,
            bn.running_var,
            training=use_batch,
            momentum=bn.momentum,
            eps=bn.eps,
        )

    def forward(self, responses: Tensor) -> Tensor:
        if responses.shape[-1] != self.response_dim:
            raise ValueError(
                f"Response length {responses.shape[-1]} does not match head size "
                f"{self.response_dim}; heads are sized for the configured resolution"
            )
        leading = responses.shape[:-1]
        x = self.bn_in(responses.reshape(-1, 1, self.response_dim))
        x = self.fc(x).view(-1, 1)
        return (self.scale * self._standardize(x)).view(leading)


class DomainAttention(nn.Module):
    """FC-ReLU-FC-softmax over concatenated per-domain response vectors."""

    def __init__(self, input_dim: int, num_domains: int, reduction: int = 16) -> None:
        super().__init__()
        self.input_dim = input_dim
        self.num_domains = num_domains
        hidden = max(1, math.ceil(input_dim / reduction))
        self.fc1 = nn.Linear(input_dim, hidden)
        self.fc2 = nn.Linear(hidden, num_domains)

    def forward(self, stacked: Tensor) -> Tensor:
        if stacked.shape[-1] != self.input_dim:
            raise ValueError(f"Expected {self.input_dim} inputs, got {stacked.shape[-1]}")
        return F.softmax(self.fc2(F.relu(self.fc1(stacked))), dim=-1)


class MultiScaleMatcher(nn.Module):
    """Concatenates best-correspondence vectors from several stages and scores them.

    With ``per_scale_heads`` every scale gets its own head and the scores are summed.
    """

    def __init__(
        self,
        stage_shapes: list[tuple[int, int, int]],
        scales: list[int],
        bidirectional: bool = True,
        per_scale_heads: bool = False,
        chunk_size: int = 16,
        score_scale: float = 1.0,
    ) -> None:
        super().__init__()
        if not scales:
            raise ValueError("At least one scale is required")
        if max(scales) >= len(stage_shapes):
            raise ValueError(f"Scale {max(scales)} exceeds {len(stage_shapes)} stages")
        self.scales = list(scales)
        self.bidirectional = bidirectional
        self.per_scale_heads = per_scale_heads
        self.chunk_size = chunk_size
        self.response_dims = [
            response_dim(stage_shapes[s][1], stage_shapes[s][2], bidirectional) for s in scales
        ]
        if per_scale_heads:
            # Summed per-scale scores keep the overall scale
            share = score_scale / len(self.response_dims)
            self.heads = nn.ModuleList(SimilarityHead(d, share) for d in self.response_dims)
        else:
            self.heads = nn.ModuleList([SimilarityHead(sum(self.response_dims), score_scale)])

    def responses(self, query: FeatureMapSet, gallery: FeatureMapSet) -> list[Tensor]:
        """Per-scale [Q, G, L_s] responses."""
        if query.num_stages != gallery.num_stages:
            raise ValueError(
                f"Stage mismatch: query has {query.num_stages}, gallery has {gallery.num_stages}"
            )
        if max(self.scales) >= query.num_stages:
            raise ValueError(f"Scale {max(self.scales)} not available in {query.num_stages} stages")
        return [
            pairwise_responses(
                query.maps[s], gallery.maps[s], self.bidirectional, self.chunk_size
            )
            for s in self.scales
        ]

    def score(self, responses: list[Tensor]) -> Tensor:
        if self.per_scale_heads:
            return sum(head(r) for head, r in zip(self.heads, responses))
        return self.heads[0](torch.cat(responses, dim=-1))

    def forward(self, query: FeatureMapSet, gallery: FeatureMapSet) -> Tensor:
        return self.score(self.responses(query, gallery))


class DomainAdaptiveMatcher(nn.Module):
    """Mixes the K experts' response vectors at every scale, then scores the mixture.

    ``attention`` predicts one weight simplex per pair; ``average`` mixes uniformly.
    """

    def __init__(
        self,
        stage_shapes: list[tuple[int, int, int]],
        scales: list[int],
        num_domains: int,
        aggregation: Literal["attention", "average"] = "attention",
        bidirectional: bool = True,
        per_scale_heads: bool = False,
        reduction: int = 16,
        chunk_size: int = 16,
        score_scale: float = 1.0,
    ) -> None:
        super().__init__()
        if aggregation not in ("attention", "average"):
            raise ValueError(f"Unknown aggregation {aggregation!r}")
        self.num_domains = num_domains
        self.aggregation = aggregation
        self.matcher = MultiScaleMatcher(
            stage_shapes, scales, bidirectional, per_scale_heads, chunk_size, score_scale
        )
        self.attention = DomainAttention(
            num_domains * sum(self.matcher.response_dims), num_domains, reduction
        )

    def domain_weights(self, per_domain: list[list[Tensor]]) -> Tensor:
        """[Q, G, K] simplex weights for the experts' responses."""
        if self.aggregation == "average":
            reference = per_domain[0][0]
            return reference.new_full(
                (*reference.shape[:-1], self.num_domains), 1.0 / self.num_domains
            )
        stacked = torch.cat([torch.cat(responses, dim=-1) for responses in per_domain], dim=-1)
        return self.attention(stacked)

    def mix(self, per_domain: list[list[Tensor]]) -> list[Tensor]:
        if len(per_domain) != self.num_domains:
            raise ValueError(f"Expected {self.num_domains} experts, got {len(per_domain)}")
        weights = self.domain_weights(per_domain)
        return [
            sum(weights[..., k, None] * per_domain[k][s] for k in range(self.num_domains))
            for s in range(len(self.matcher.scales))
        ]

    def forward(
        self, query_sets: list[FeatureMapSet], gallery_sets: list[FeatureMapSet]
    ) -> Tensor:
        if len(query_sets) != self.num_domains or len(gallery_sets) != self.num_domains:
            raise ValueError(
                f"Expected {self.num_domains} expert feature sets, got "
                f"{len(query_sets)} query and {len(gallery_sets)} gallery"
            )
        per_domain = [self.matcher.responses(q, g) for q, g in zip(query_sets, gallery_sets)]
        return self.matcher.score(self.mix(per_domain))


def ms_qaconv_similarity(
    query: FeatureMapSet, gallery: FeatureMapSet, matcher: MultiScaleMatcher
) -> Tensor:
    """Score of one query image against one gallery image."""
    if query.batch_size != 1 or gallery.batch_size != 1:
        raise ValueError("ms_qaconv_similarity scores exactly one pair")
    return matcher(query, gallery)[0, 0]


def msda_qaconv_similarity(
    query_sets: list[FeatureMapSet],
    gallery_sets: list[FeatureMapSet],
    matcher: DomainAdaptiveMatcher,
) -> Tensor:
    """Domain-adaptive score of one query image against one gallery image."""
    if any(s.batch_size != 1 for s in [*query_sets, *gallery_sets]):
        raise ValueError("msda_qaconv_similarity scores exactly one pair")
    return matcher(query_sets, gallery_sets)[0, 0]


@torch.no_grad()
def correspondence_map(query_map: Tensor, gallery_map: Tensor) -> tuple[Tensor, Tensor]:
    """For each query location, the flat index and cosine of its best gallery location."""
    kernels = build_kernels(query_map)
    gallery = normalize_locations(gallery_map).flatten(1)  # [C, Lg]
    sim = kernels.kernels @ gallery
    best, index = sim.max(dim=1)
    return index.view(kernels.size), best.view(kernels.size)


def dump_correspondences(
    query_maps: Tensor,
    gallery_maps: Tensor,
    pairs: list[tuple[int, int]],
    path: str | Path,
) -> Path:
    """Write best-correspondence index maps for selected (query, gallery) pairs to ``.npz``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    positions, scores = [], []
    for qi, gi in pairs:
        index, best = correspondence_map(query_maps[qi], gallery_maps[gi])
        positions.append(index.cpu().numpy())
        scores.append(best.cpu().numpy())
    np.savez_compressed(
        path,
        query_index=np.array([p[0] for p in pairs], dtype=np.int64),
        gallery_index=np.array([p[1] for p in pairs], dtype=np.int64),
        gallery_size=np.array(gallery_maps.shape[-2:], dtype=np.int64),
        best_position=np.stack(positions) if positions else np.zeros((0, 0, 0), np.int64),
        best_score=np.stack(scores) if scores else np.zeros((0, 0, 0), np.float32),
    )
    logger.info("Wrote correspondence maps", path=str(path), pairs=len(pairs))
    return path
