"""Self-describing training checkpoints."""

import json
from pathlib import Path
from typing import Any

import numpy as np
import torch
from structlog import get_logger
from torch import nn

from src.core.config import ExperimentConfig, config_from_text, config_hash, render_config
from src.core.errors import ConfigError
from src.models.tal import TwoStreamModel

logger = get_logger()

CHECKPOINT_FORMAT = "tal-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path: str | Path,
    *,
    config: ExperimentConfig,
    num_domains: int,
    epoch: int,
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    rng: np.random.Generator,
    history: list[dict[str, Any]],
    samplers: dict[str, list[list[int]]] | None = None,
) -> Path:
    """Write everything needed to resume training or score with the model.

    The payload holds no timestamps, so identical runs produce identical files.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": render_config(config),
        "config_hash": config_hash(config),
        "num_domains": num_domains,
        "epoch": epoch,
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "numpy_rng": json.dumps(rng.bit_generator.state),
        "torch_rng": torch.get_rng_state(),
        "history": history,
        "samplers": samplers or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    logger.info("Saved checkpoint", path=str(path), epoch=epoch)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, Any], ExperimentConfig]:
    """Read and verify a checkpoint.

    Returns:
        The raw payload and the config it was trained with
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:
        raise ConfigError(f"Unreadable checkpoint {path}: {e}") from e

    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a training checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(
            f"Checkpoint version {payload.get('version')} is not supported "
            f"(expected {CHECKPOINT_VERSION})"
        )
    config = config_from_text(payload["config"])
    if config_hash(config) != payload["config_hash"]:
        raise ConfigError(f"Checkpoint {path} config does not match its recorded hash")
    logger.debug("Loaded checkpoint", path=str(path), epoch=payload["epoch"])
    return payload, config


def restore_rng(payload: dict[str, Any]) -> np.random.Generator:
    """Numpy generator in the state it had when the checkpoint was written."""
    state = json.loads(payload["numpy_rng"])
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def load_model(path: str | Path) -> tuple[TwoStreamModel, ExperimentConfig]:
    """Rebuild the trained two-stream model from a checkpoint, in eval mode."""
    payload, config = load_checkpoint(path)
    model = TwoStreamModel(config, payload["num_domains"])
    model.load_state_dict(payload["model"])
    model.eval()
    return model, config
