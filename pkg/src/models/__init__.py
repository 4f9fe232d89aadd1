"""Backbone, domain-routed normalization and query-adaptive matchers."""

from .backbone import Backbone, ConvNormBlock, FeatureMapSet
from .matching import (
    DomainAdaptiveMatcher,
    DomainAttention,
    MatchKernelSet,
    MultiScaleMatcher,
    SimilarityHead,
    build_kernels,
    correspondence_map,
    dump_correspondences,
    ms_qaconv_similarity,
    msda_qaconv_similarity,
    pairwise_responses,
    qaconv_response,
)
from .normalization import (
    ALL_EXPERTS,
    INVARIANT,
    DomainAdaptiveBatchNorm,
    DomainMixingHead,
    DomainNorm2d,
    DomainSpecificBatchNorm,
)
from .tal import (
    LabeledImages,
    SimilarityMatrix,
    TwoStreamModel,
    dsbn_group,
    group_of,
    pairwise_scores,
)

__all__ = [
    "ALL_EXPERTS",
    "INVARIANT",
    "Backbone",
    "ConvNormBlock",
    "DomainAdaptiveBatchNorm",
    "DomainAdaptiveMatcher",
    "DomainAttention",
    "DomainMixingHead",
    "DomainNorm2d",
    "DomainSpecificBatchNorm",
    "FeatureMapSet",
    "LabeledImages",
    "MatchKernelSet",
    "MultiScaleMatcher",
    "SimilarityHead",
    "SimilarityMatrix",
    "TwoStreamModel",
    "build_kernels",
    "correspondence_map",
    "dsbn_group",
    "dump_correspondences",
    "group_of",
    "ms_qaconv_similarity",
    "msda_qaconv_similarity",
    "pairwise_responses",
    "pairwise_scores",
    "qaconv_response",
]
