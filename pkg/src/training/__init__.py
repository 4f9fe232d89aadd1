"""Losses, batch samplers, checkpoints and the three-phase trainer."""

from .checkpoint import load_checkpoint, load_model, save_checkpoint
from .loss import BatchHardTripletLoss, LabeledSimilarityBatch, TripletResult, batch_hard_triplet
from .sampler import (
    ClassGraph,
    GraphSampler,
    RandomIdentitySampler,
    build_class_graph,
    make_sampler,
    nearest_classes,
)
from .trainer import IsolationError, StepResult, Trainer, TrainingBatch, learning_rate

__all__ = [
    "BatchHardTripletLoss",
    "ClassGraph",
    "GraphSampler",
    "IsolationError",
    "LabeledSimilarityBatch",
    "RandomIdentitySampler",
    "StepResult",
    "Trainer",
    "TrainingBatch",
    "TripletResult",
    "batch_hard_triplet",
    "build_class_graph",
    "learning_rate",
    "load_checkpoint",
    "load_model",
    "make_sampler",
    "nearest_classes",
    "save_checkpoint",
]
