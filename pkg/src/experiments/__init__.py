"""Ablation experiments."""

from .ablation import AXES, ablation_variants, run_ablation

__all__ = ["AXES", "ablation_variants", "run_ablation"]
