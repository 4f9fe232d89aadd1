"""Two-stream model: domain-specific experts and the domain-invariant stream."""

import hashlib
import re
from collections.abc import Iterator
from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
from structlog import get_logger
from torch import Tensor, nn

from src.core.config import ExperimentConfig

from .backbone import Backbone, FeatureMapSet
from .matching import DomainAdaptiveMatcher, MultiScaleMatcher
from .normalization import ALL_EXPERTS, INVARIANT

logger = get_logger()

Stream = Literal["ds", "di"]

BACKBONE_CONV = "backbone_conv"
DS_HEAD = "ds_head"
MSDA = "msda"
DI_NORM = "di_norm"
DI_HEAD = "di_head"

_GROUP_PATTERNS = [
    (re.compile(r"^backbone\..*\.conv\.weight$"), BACKBONE_CONV),
    (re.compile(r"^backbone\..*\.norm\.dsbn\.bns\.(\d+)\."), "dsbn_{0}"),
    (re.compile(r"^backbone\..*\.norm\.(dabn|plain)\."), DI_NORM),
    (re.compile(r"^ds_matcher\."), DS_HEAD),
    (re.compile(r"^msda_matcher\."), MSDA),
    (re.compile(r"^di_matcher\."), DI_HEAD),
]


def dsbn_group(domain: int) -> str:
    return f"dsbn_{domain}"


def group_of(name: str) -> str:
    """Parameter group owning a parameter or buffer, by its qualified name."""
    for pattern, group in _GROUP_PATTERNS:
        match = pattern.match(name)
        if match:
            return group.format(*match.groups())
    raise KeyError(f"{name} belongs to no parameter group")


class TwoStreamModel(nn.Module):
    """Shared backbone, DS-stream heads (per-expert MS-QAConv and MSDA-QAConv) and DI-stream head."""

    def __init__(self, config: ExperimentConfig, num_domains: int) -> None:
        super().__init__()
        self.config = config
        self.num_domains = num_domains
        self.backbone = Backbone(config.backbone, num_domains)
        shapes = self.backbone.stage_shapes()
        matching = config.matching
        self.ds_matcher = MultiScaleMatcher(
            shapes,
            matching.scales,
            matching.bidirectional,
            matching.per_scale_heads,
            matching.chunk_size,
            matching.score_scale,
        )
        self.msda_matcher = DomainAdaptiveMatcher(
            shapes,
            matching.scales,
            num_domains,
            aggregation="average" if matching.aggregation == "average" else "attention",
            bidirectional=matching.bidirectional,
            per_scale_heads=matching.per_scale_heads,
            reduction=matching.attention_reduction,
            chunk_size=matching.chunk_size,
            score_scale=matching.score_scale,
        )
        self.di_matcher = (
            MultiScaleMatcher(
                shapes,
                matching.scales,
                matching.bidirectional,
                matching.per_scale_heads,
                matching.chunk_size,
                matching.score_scale,
            )
            if self.has_invariant_stream
            else None
        )

    @property
    def has_invariant_stream(self) -> bool:
        return self.config.backbone.norm_mode != "per-domain"

    @property
    def aggregation(self) -> str:
        return self.config.matching.aggregation

    # Parameter groups

    def group_names(self) -> list[str]:
        names = [BACKBONE_CONV, *(dsbn_group(i) for i in range(self.num_domains)), DS_HEAD, MSDA]
        if self.has_invariant_stream:
            names += [DI_NORM, DI_HEAD]
        return names

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        """Every learnable parameter, keyed by the group it belongs to."""
        groups: dict[str, list[nn.Parameter]] = {name: [] for name in self.group_names()}
        for name, param in self.named_parameters():
            groups[group_of(name)].append(param)
        return groups

    def group_tensors(self, group: str) -> Iterator[tuple[str, Tensor]]:
        """Parameters and buffers (running statistics included) of one group."""
        for name, tensor in [*self.named_parameters(), *self.named_buffers()]:
            if group_of(name) == group:
                yield name, tensor

    def group_digest(self, group: str) -> str:
        """SHA-256 over the exact bytes of a group's tensors."""
        digest = hashlib.sha256()
        for name, tensor in self.group_tensors(group):
            digest.update(name.encode())
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
        return digest.hexdigest()

    def set_trainable(self, groups: list[str]) -> None:
        """Enable gradients for ``groups`` only."""
        active = set(groups)
        for name, params in self.parameter_groups().items():
            for param in params:
                param.requires_grad_(name in active)

    # Features and scores

    def features(self, images: Tensor, stream: Stream) -> FeatureMapSet | list[FeatureMapSet]:
        """K expert feature sets for the DS stream, one invariant set for the DI stream."""
        if stream == "ds":
            return self.backbone.extract(images, ALL_EXPERTS)
        if not self.has_invariant_stream:
            raise ValueError("Model was built without a domain-invariant stream")
        return self.backbone.extract(images, INVARIANT)

    def score(
        self,
        query: FeatureMapSet | list[FeatureMapSet],
        gallery: FeatureMapSet | list[FeatureMapSet],
        stream: Stream,
    ) -> Tensor:
        """[Q, G] similarity scores; higher means more similar."""
        if stream == "di":
            if self.di_matcher is None:
                raise ValueError("Model was built without a domain-invariant stream")
            return self.di_matcher(query, gallery)
        if self.aggregation == "voting":
            return sum(self.ds_matcher(q, g) for q, g in zip(query, gallery))
        return self.msda_matcher(query, gallery)

    def expert_scores(self, images: Tensor, domain: int) -> Tensor:
        """[B, B] MS-QAConv scores of a batch through expert ``domain``."""
        features = self.backbone.extract(images, domain)
        return self.ds_matcher(features, features)


@dataclass
class LabeledImages:
    """Preprocessed image tensor with the labels evaluation needs."""

    images: Tensor
    pids: np.ndarray
    camids: np.ndarray
    domains: np.ndarray

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class SimilarityMatrix:
    """Q x G (or B x B) scores with the labels of both sides attached."""

    scores: np.ndarray
    query_pids: np.ndarray
    gallery_pids: np.ndarray
    query_camids: np.ndarray
    gallery_camids: np.ndarray
    query_domains: np.ndarray
    gallery_domains: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.scores.shape


def _batched_features(
    model: TwoStreamModel, images: Tensor, stream: Stream, batch_size: int
) -> FeatureMapSet | list[FeatureMapSet]:
    parts = [model.features(images[i : i + batch_size], stream) for i in range(0, len(images), batch_size)]
    if stream == "di":
        return FeatureMapSet.concat(parts)
    return [FeatureMapSet.concat([p[k] for p in parts]) for k in range(model.num_domains)]


def _select(features: FeatureMapSet | list[FeatureMapSet], index: slice):
    if isinstance(features, list):
        return [f.select(index) for f in features]
    return features.select(index)


@torch.no_grad()
def pairwise_scores(
    model: TwoStreamModel,
    query: LabeledImages,
    gallery: LabeledImages | None = None,
    stream: Stream = "ds",
    batch_size: int = 64,
) -> SimilarityMatrix:
    """Full score matrix for one stream.

    Features are extracted once per image; scoring runs in query blocks.
    With ``gallery`` None the batch is scored against itself.
    """
    if len(query) == 0 or (gallery is not None and len(gallery) == 0):
        raise ValueError("pairwise_scores needs non-empty query and gallery sets")
    was_training = model.training
    model.eval()
    try:
        query_features = _batched_features(model, query.images, stream, batch_size)
        if gallery is None:
            gallery, gallery_features = query, query_features
        else:
            gallery_features = _batched_features(model, gallery.images, stream, batch_size)
        blocks = [
            model.score(_select(query_features, slice(i, i + batch_size)), gallery_features, stream)
            for i in range(0, len(query), batch_size)
        ]
        scores = torch.cat(blocks, dim=0).cpu().numpy()
    finally:
        model.train(was_training)
    logger.debug("Scored pairs", stream=stream, shape=scores.shape)
    return SimilarityMatrix(
        scores=scores,
        query_pids=query.pids,
        gallery_pids=gallery.pids,
        query_camids=query.camids,
        gallery_camids=gallery.camids,
        query_domains=query.domains,
        gallery_domains=gallery.domains,
    )
