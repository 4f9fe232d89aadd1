"""Shared fixtures: a miniature experiment config and in-memory synthetic data."""

import numpy as np
import pytest
import torch

from src.core.config import ExperimentConfig, load_config
from src.data.dataset import ReidDataset, hybrid_view
from src.data.synthetic import SyntheticSuite, generate_synthetic

# 16x8 inputs give stage maps of 4x2 and 2x1
TINY_OVERRIDES = {
    "SEED": "0",
    "BACKBONE__HEIGHT": "16",
    "BACKBONE__WIDTH": "8",
    "BACKBONE__STEM_CHANNELS": "4",
    "BACKBONE__CHANNELS": "4,8",
    "BACKBONE__CONVS_PER_STAGE": "1,1",
    "BACKBONE__REDUCTION": "2",
    "MATCHING__ATTENTION_REDUCTION": "4",
    "MATCHING__SCORE_SCALE": "1.0",
    "SAMPLER__BATCH_SIZE": "8",
    "SAMPLER__NUM_IDENTITIES": "2",
    "SAMPLER__NUM_INSTANCES": "4",
    "SAMPLER__NUM_NEIGHBORS": "1",
    "TRAIN__MARGIN": "1.0",
    "TRAIN__EPOCHS": "2",
    "TRAIN__DECAY_EPOCH": "1",
    "TRAIN__ITERS_PER_EPOCH": "2",
    "DATA__SOURCES": "source_0,source_1",
    "DATA__SYNTHETIC__NUM_DOMAINS": "2",
    "DATA__SYNTHETIC__IDS_PER_DOMAIN": "4",
    "DATA__SYNTHETIC__IMAGES_PER_ID": "4",
    "DATA__SYNTHETIC__TARGET_IDS": "3",
    "DATA__SYNTHETIC__HEIGHT": "16",
    "DATA__SYNTHETIC__WIDTH": "8",
    "EVALUATION__BATCH_SIZE": "8",
}


def tiny_config(**overrides: str) -> ExperimentConfig:
    """Miniature config; keyword overrides use flat keys, e.g. ``BACKBONE__NORM_MODE="plain"``."""
    return load_config(None, {**TINY_OVERRIDES, **overrides})


@pytest.fixture
def config() -> ExperimentConfig:
    return tiny_config()


@pytest.fixture
def suite(config: ExperimentConfig) -> SyntheticSuite:
    return generate_synthetic(config.data.synthetic, config.data.sources, config.data.target)


@pytest.fixture
def training_set(suite: SyntheticSuite) -> ReidDataset:
    return hybrid_view(suite.sources)


@pytest.fixture
def images(config: ExperimentConfig) -> torch.Tensor:
    """Four random images at the tiny config's resolution."""
    generator = torch.Generator().manual_seed(0)
    return torch.randn(4, 3, config.backbone.height, config.backbone.width, generator=generator)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(0)
