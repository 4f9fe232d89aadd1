"""Image decoding, training augmentation and batch assembly."""

from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from structlog import get_logger
from torch import Tensor

from src.core.config import AugmentConfig, DataConfig
from src.core.errors import DataError

from .dataset import ReidDataset

logger = get_logger()


def load_rgb(path: str | Path, height: int, width: int) -> np.ndarray:
    """Decode an image file to an [H, W, 3] uint8 array at the given size."""
    try:
        with Image.open(path) as image:
            image = image.convert("RGB")
            if image.size != (width, height):
                image = image.resize((width, height), Image.Resampling.BILINEAR)
            return np.asarray(image, dtype=np.uint8).copy()
    except (OSError, ValueError) as e:
        raise DataError(f"Cannot read image {path}: {e}") from e


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    """Random flip, pad-and-crop and colour jitter on an [H, W, 3] uint8 image.

    All randomness comes from ``rng``; a zero magnitude disables an operation
    without consuming draws.
    """
    height, width = image.shape[:2]
    x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)

    if config.flip_prob > 0 and rng.random() < config.flip_prob:
        x = TF.hflip(x)
    if config.pad > 0:
        top, left = rng.integers(0, 2 * config.pad + 1, size=2)
        x = TF.crop(TF.pad(x, [config.pad]), int(top), int(left), height, width)
    if config.brightness > 0:
        x = TF.adjust_brightness(x, rng.uniform(1 - config.brightness, 1 + config.brightness))
    if config.contrast > 0:
        x = TF.adjust_contrast(x, rng.uniform(1 - config.contrast, 1 + config.contrast))
    if config.saturation > 0:
        x = TF.adjust_saturation(x, rng.uniform(1 - config.saturation, 1 + config.saturation))
    if config.hue > 0:
        x = TF.adjust_hue(x, rng.uniform(-config.hue, config.hue))

    return x.permute(1, 2, 0).contiguous().numpy()


def to_tensor(images: list[np.ndarray] | np.ndarray, mean: list[float], std: list[float]) -> Tensor:
    """Stack uint8 [H, W, 3] images into a normalized float [B, 3, H, W] tensor."""
    batch = torch.from_numpy(np.stack(images)).permute(0, 3, 1, 2).float().div_(255.0)
    return TF.normalize(batch, mean, std)


class BatchBuilder:
    """Decodes a dataset's images once and assembles model-ready batches."""

    def __init__(self, dataset: ReidDataset, config: DataConfig, height: int, width: int) -> None:
        """Initialize the batch builder.

        Args:
            dataset: images to serve; in-memory images are used when present
            config: normalization constants and augmentation settings
            height: model input height
            width: model input width
        """
        self.dataset = dataset
        self.config = config
        self.height = height
        self.width = width
        self._cache: dict[int, np.ndarray] = {}

    def image(self, index: int) -> np.ndarray:
        if index not in self._cache:
            if self.dataset.images is not None:
                image = self.dataset.images[index]
                if image.shape[:2] != (self.height, self.width):
                    image = np.asarray(
                        Image.fromarray(image).resize(
                            (self.width, self.height), Image.Resampling.BILINEAR
                        )
                    )
            else:
                image = load_rgb(self.dataset.paths[index], self.height, self.width)
            self._cache[index] = image
        return self._cache[index]

    def batch(
        self, indices: np.ndarray | list[int], rng: np.random.Generator | None = None
    ) -> Tensor:
        """Preprocessed [B, 3, H, W] tensor; augmented when ``rng`` is given and augmentation is on."""
        images = [self.image(int(i)) for i in indices]
        if rng is not None and self.config.augment.enabled:
            images = [augment(image, rng, self.config.augment) for image in images]
        return to_tensor(images, self.config.mean, self.config.std)

    def all(self) -> Tensor:
        """Every image of the dataset, unaugmented, in record order."""
        return self.batch(np.arange(len(self.dataset)))
