"""Experiment configuration schema and the flat key-value file format.

Config files are dotenv-style documents::

    VERSION=1
    SEED=0
    BACKBONE__CHANNELS=32,64
    TRAIN__MARGIN=16.0
    MATCHING__SCORE_SCALE=16.0

Nesting is expressed with ``__``, lists are comma separated and keys are
case-insensitive. Unknown keys are rejected at every level.
"""

import hashlib
import io
from collections.abc import Iterable, Mapping
from pathlib import Path
from typing import Annotated, Any, Literal

from dotenv import dotenv_values
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, ValidationError
from pydantic import field_validator, model_validator
from structlog import get_logger

from .errors import ConfigError

logger = get_logger()

CONFIG_VERSION = 1
KEY_DELIMITER = "__"

NormMode = Literal["per-domain", "adaptive", "average", "plain"]
Aggregation = Literal["attention", "average", "voting"]
FusionMode = Literal["sum", "ds", "di"]


def _split_csv(value: Any) -> Any:
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


IntList = Annotated[list[int], BeforeValidator(_split_csv)]
FloatList = Annotated[list[float], BeforeValidator(_split_csv)]
StrList = Annotated[list[str], BeforeValidator(_split_csv)]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


def conv_output_size(size: int, stride: int) -> int:
    """Output length of a 3x3 convolution with padding 1."""
    return (size - 1) // stride + 1


class BackboneConfig(_Section):
    """Shape of the shared convolutional backbone and its normalization sites."""

    height: int = Field(default=96, gt=0)
    width: int = Field(default=32, gt=0)
    stem_channels: int = Field(default=16, gt=0)
    stem_stride: int = Field(default=2, ge=1)
    channels: IntList = Field(default_factory=lambda: [32, 64])
    strides: IntList = Field(default_factory=lambda: [2, 2])
    convs_per_stage: IntList = Field(default_factory=lambda: [2, 1])
    norm_mode: NormMode = "adaptive"
    reduction: int = Field(default=16, ge=1)
    bn_momentum: float = Field(default=0.1, gt=0, le=1)
    bn_eps: float = Field(default=1e-5, gt=0)

    @model_validator(mode="after")
    def validate_stages(self) -> "BackboneConfig":
        """Validate per-stage lists."""
        if len(self.channels) < 2:
            raise ValueError("Backbone needs at least two stages")
        if not len(self.channels) == len(self.strides) == len(self.convs_per_stage):
            raise ValueError("channels, strides and convs_per_stage must have equal length")
        if any(c <= 0 for c in self.channels):
            raise ValueError("All channel counts must be positive")
        if any(s < 1 for s in self.strides) or any(n < 1 for n in self.convs_per_stage):
            raise ValueError("Strides and convs_per_stage must be >= 1")
        return self

    @property
    def num_stages(self) -> int:
        return len(self.channels)

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) of every stage output for the configured resolution."""
        height = conv_output_size(self.height, self.stem_stride)
        width = conv_output_size(self.width, self.stem_stride)
        shapes = []
        for channels, stride in zip(self.channels, self.strides):
            height = conv_output_size(height, stride)
            width = conv_output_size(width, stride)
            shapes.append((channels, height, width))
        return shapes


class MatchingConfig(_Section):
    """Query-adaptive matching options."""

    scales: IntList = Field(default_factory=lambda: [0, 1])
    bidirectional: bool = True
    per_scale_heads: bool = False
    aggregation: Aggregation = "attention"
    attention_reduction: int = Field(default=16, ge=1)
    chunk_size: int = Field(default=16, ge=1)
    # Standard deviation of training scores; the triplet margin is in these units
    score_scale: float = Field(default=16.0, gt=0)

    @field_validator("scales")
    def validate_scales(cls, v: list[int]) -> list[int]:
        """Scales are distinct, sorted stage indices."""
        if not v:
            raise ValueError("At least one matching scale is required")
        if len(set(v)) != len(v) or any(s < 0 for s in v):
            raise ValueError(f"Invalid scale list: {v}")
        return sorted(v)


class SamplerConfig(_Section):
    """Identity-balanced batch composition."""

    kind: Literal["graph", "random"] = "graph"
    batch_size: int = Field(default=64, gt=0)
    num_identities: int = Field(default=16, ge=2)
    num_instances: int = Field(default=4, ge=2)
    num_neighbors: int = Field(default=15, ge=1)
    refresh_epochs: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def validate_composition(self) -> "SamplerConfig":
        """identities x instances must fill the batch exactly."""
        if self.num_identities * self.num_instances != self.batch_size:
            raise ValueError(
                f"num_identities * num_instances ({self.num_identities} * "
                f"{self.num_instances}) != batch_size ({self.batch_size})"
            )
        if self.num_neighbors < self.num_identities - 1:
            raise ValueError("num_neighbors must be >= num_identities - 1")
        return self


class TrainConfig(_Section):
    """Optimizer schedule and phase composition."""

    epochs: int = Field(default=30, ge=1)
    lr: float = Field(default=0.005, gt=0)
    decay_epoch: int = Field(default=20, ge=1)
    decay_factor: float = Field(default=10.0, gt=0)
    weight_decay: float = Field(default=5e-4, ge=0)
    momentum: float = Field(default=0.9, ge=0)
    # No default: every experiment states its margin explicitly
    margin: float = Field(gt=0)
    loss_reduction: Literal["sum", "mean"] = "sum"
    iters_per_epoch: int | None = Field(default=None, ge=1)
    phase_steps: IntList = Field(default_factory=lambda: [1, 1, 1])
    schedule: Literal["staged", "interleaved"] = "staged"
    checkpoint_every: int = Field(default=1, ge=1)

    @field_validator("phase_steps")
    def validate_phase_steps(cls, v: list[int]) -> list[int]:
        """Three non-negative step ratios for phases A, B, C."""
        if len(v) != 3 or any(s < 0 for s in v) or not any(v):
            raise ValueError(f"phase_steps must be three non-negative ratios, got {v}")
        return v

    @model_validator(mode="after")
    def validate_decay(self) -> "TrainConfig":
        """Decay must happen before training ends."""
        if self.decay_epoch >= self.epochs and self.epochs > 1:
            raise ValueError(
                f"decay_epoch ({self.decay_epoch}) must be < epochs ({self.epochs})"
            )
        return self


class AugmentConfig(_Section):
    """Training-time augmentation magnitudes; zero disables an operation."""

    enabled: bool = True
    flip_prob: float = Field(default=0.5, ge=0, le=1)
    pad: int = Field(default=4, ge=0)
    brightness: float = Field(default=0.2, ge=0, lt=1)
    contrast: float = Field(default=0.15, ge=0, lt=1)
    saturation: float = Field(default=0.2, ge=0, lt=1)
    hue: float = Field(default=0.05, ge=0, le=0.5)


class SyntheticConfig(_Section):
    """Procedural multi-domain person dataset.

    Style lists are indexed by domain; the entry after the last training
    domain styles the held-out domain.
    """

    num_domains: int = Field(default=3, ge=1)
    ids_per_domain: int = Field(default=50, ge=2)
    images_per_id: int = Field(default=8, ge=2)
    target_ids: int = Field(default=30, ge=2)
    num_cameras: int = Field(default=2, ge=2)
    height: int = Field(default=96, gt=0)
    width: int = Field(default=32, gt=0)
    seed: int = 0
    hue_shifts: FloatList = Field(default_factory=lambda: [0.0, 40.0, -40.0, 160.0])
    contrasts: FloatList = Field(default_factory=lambda: [1.0, 0.75, 1.25, 0.6])
    brightness: FloatList = Field(default_factory=lambda: [0.0, 25.0, -25.0, 10.0])
    textures: FloatList = Field(default_factory=lambda: [0.2, 0.6, 0.4, 0.8])
    noise_levels: FloatList = Field(default_factory=lambda: [2.0, 6.0, 4.0, 10.0])
    # Identities differ by this much in some clothing colour channel
    min_colour_gap: float = Field(default=5.0, ge=0)
    # Euclidean distance between any two domains' mean RGB values, in 8-bit levels
    min_domain_gap: float = Field(default=4.0, ge=0)

    @model_validator(mode="after")
    def validate_styles(self) -> "SyntheticConfig":
        """One style entry per training domain plus the held-out domain."""
        needed = self.num_domains + 1
        for name in ("hue_shifts", "contrasts", "brightness", "textures", "noise_levels"):
            if len(getattr(self, name)) < needed:
                raise ValueError(f"{name} needs {needed} entries for {self.num_domains} domains")
        return self


class DataConfig(_Section):
    """Where training and held-out data live, and how images are prepared."""

    root: str = "data"
    layout: Literal["market", "csv"] = "market"
    sources: StrList = Field(default_factory=lambda: ["source_0", "source_1", "source_2"])
    target: str = "target"
    camera_as_domain: bool = False
    mean: FloatList = Field(default_factory=lambda: [0.485, 0.456, 0.406])
    std: FloatList = Field(default_factory=lambda: [0.229, 0.224, 0.225])
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    synthetic: SyntheticConfig = Field(default_factory=SyntheticConfig)

    @model_validator(mode="after")
    def validate_sources(self) -> "DataConfig":
        """Need sources and per-channel constants."""
        if not self.sources:
            raise ValueError("At least one source domain is required")
        if len(self.mean) != 3 or len(self.std) != 3 or any(s <= 0 for s in self.std):
            raise ValueError("mean and std need three entries with positive std")
        return self


class EvalConfig(_Section):
    """Inference-time fusion and reporting options."""

    fusion: FusionMode = "sum"
    standardize: bool = True
    batch_size: int = Field(default=64, ge=1)
    ranks: IntList = Field(default_factory=lambda: [1, 5, 10])


class ExperimentConfig(_Section):
    """Complete, validated description of one experiment."""

    version: int = CONFIG_VERSION
    seed: int = 0
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    matching: MatchingConfig = Field(default_factory=MatchingConfig)
    sampler: SamplerConfig = Field(default_factory=SamplerConfig)
    train: TrainConfig
    data: DataConfig = Field(default_factory=DataConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @field_validator("version")
    def validate_version(cls, v: int) -> int:
        """Only the current config version is understood."""
        if v != CONFIG_VERSION:
            raise ValueError(f"Unsupported config version {v} (expected {CONFIG_VERSION})")
        return v

    @model_validator(mode="after")
    def validate_cross_sections(self) -> "ExperimentConfig":
        """Checks spanning several sections."""
        if max(self.matching.scales) >= self.backbone.num_stages:
            raise ValueError(
                f"Matching scale {max(self.matching.scales)} exceeds "
                f"{self.backbone.num_stages} backbone stages"
            )
        if self.backbone.norm_mode == "per-domain" and self.evaluation.fusion != "ds":
            raise ValueError("per-domain normalization has no invariant stream; use fusion=ds")
        return self


def unflatten(flat: Mapping[str, str]) -> dict[str, Any]:
    """Turn ``SECTION__KEY=value`` pairs into nested dictionaries."""
    nested: dict[str, Any] = {}
    for raw_key, value in flat.items():
        if value is None or value == "":
            continue
        parts = [part for part in raw_key.strip().lower().split(KEY_DELIMITER) if part]
        if not parts:
            raise ConfigError(f"Empty config key: {raw_key!r}")
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"Config key {raw_key!r} conflicts with a scalar value")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"Config key {raw_key!r} names a section, not a value")
        node[parts[-1]] = value
    return nested


def _render_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_render_value(v) for v in value)
    return str(value)


def flatten(config: BaseModel) -> dict[str, str]:
    """Inverse of :func:`unflatten` for a validated config."""
    flat: dict[str, str] = {}

    def walk(prefix: str, data: dict[str, Any]) -> None:
        for key, value in data.items():
            name = f"{prefix}{KEY_DELIMITER}{key}" if prefix else key
            if isinstance(value, dict):
                walk(name, value)
            elif value is not None:
                flat[name.upper()] = _render_value(value)

    walk("", config.model_dump(mode="json"))
    return flat


def parse_overrides(items: Iterable[str]) -> dict[str, str]:
    """Parse ``KEY=VALUE`` command-line overrides."""
    overrides = {}
    for item in items:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"Override must look like KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value.strip()
    return overrides


def _validate(flat: Mapping[str, str]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(unflatten(flat))
    except ValidationError as e:
        raise ConfigError(f"Invalid experiment config: {e}") from e


def load_config(
    path: str | Path | None = None, overrides: Mapping[str, str] | None = None
) -> ExperimentConfig:
    """Load a flat config file, apply overrides and validate.

    Args:
        path: dotenv-style config file, or None to start from defaults
        overrides: extra ``KEY=VALUE`` pairs applied after the file

    Returns:
        Validated experiment config
    """
    flat: dict[str, str] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"Config file not found: {path}")
        flat.update({k: v for k, v in dotenv_values(path).items() if v is not None})
    # Overrides may use any key casing; normalise so they replace file values
    flat = {k.upper(): v for k, v in flat.items()}
    flat.update({k.upper(): v for k, v in (overrides or {}).items()})
    config = _validate(flat)
    logger.debug("Loaded experiment config", path=str(path) if path else None, keys=len(flat))
    return config


def config_from_text(text: str) -> ExperimentConfig:
    """Validate a config rendered by :func:`render_config`, e.g. one stored in a checkpoint."""
    flat = {k.upper(): v for k, v in dotenv_values(stream=io.StringIO(text)).items() if v is not None}
    return _validate(flat)


def with_overrides(config: ExperimentConfig, overrides: Mapping[str, str]) -> ExperimentConfig:
    """Copy of ``config`` with flat overrides applied and re-validated."""
    flat = flatten(config)
    flat.update({k.upper(): str(v) for k, v in overrides.items()})
    return _validate(flat)


def render_config(config: ExperimentConfig) -> str:
    """Flat text form of a config, stable across runs."""
    return "".join(f"{key}={value}\n" for key, value in flatten(config).items())


def dump_config(config: ExperimentConfig, path: str | Path) -> Path:
    """Write the effective config next to the run's artifacts."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_config(config), encoding="utf-8")
    return path


def config_hash(config: ExperimentConfig) -> str:
    """SHA-256 of the rendered config."""
    return hashlib.sha256(render_config(config).encode("utf-8")).hexdigest()
