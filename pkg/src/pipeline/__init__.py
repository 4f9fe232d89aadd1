"""Command orchestration."""

from .experiment_pipeline import EFFECTIVE_CONFIG, ExperimentPipeline

__all__ = ["EFFECTIVE_CONFIG", "ExperimentPipeline"]
