"""Core configuration, logging and error types."""

from .config import (
    AugmentConfig,
    BackboneConfig,
    DataConfig,
    EvalConfig,
    ExperimentConfig,
    MatchingConfig,
    SamplerConfig,
    SyntheticConfig,
    TrainConfig,
    config_from_text,
    config_hash,
    dump_config,
    load_config,
    parse_overrides,
    render_config,
    with_overrides,
)
from .errors import ConfigError, DataError, OutputExistsError, TalError, exit_code_for
from .settings import RuntimeSettings

__all__ = [
    "AugmentConfig",
    "BackboneConfig",
    "ConfigError",
    "DataConfig",
    "DataError",
    "EvalConfig",
    "ExperimentConfig",
    "MatchingConfig",
    "OutputExistsError",
    "RuntimeSettings",
    "SamplerConfig",
    "SyntheticConfig",
    "TalError",
    "TrainConfig",
    "config_from_text",
    "config_hash",
    "dump_config",
    "exit_code_for",
    "load_config",
    "parse_overrides",
    "render_config",
    "with_overrides",
]
