"""Dataset loading, preprocessing and synthetic data generation."""

from .dataset import (
    ImageRecord,
    ReidDataset,
    camera_domains,
    hybrid_view,
    load_dataset,
    parse_market_name,
    relabel_identities,
)
from .synthetic import SyntheticSuite, generate_synthetic, write_synthetic
from .transforms import BatchBuilder, augment, load_rgb, to_tensor

__all__ = [
    "BatchBuilder",
    "ImageRecord",
    "ReidDataset",
    "SyntheticSuite",
    "augment",
    "camera_domains",
    "generate_synthetic",
    "hybrid_view",
    "load_dataset",
    "load_rgb",
    "parse_market_name",
    "relabel_identities",
    "to_tensor",
    "write_synthetic",
]
