"""Procedural multi-domain pedestrian images for desk-scale experiments.

Every identity is a figure with its own clothing colours and build. Cameras
change viewpoint (position, scale, illumination); domains change the whole
image style (hue, contrast, brightness, background texture, sensor noise),
so a model trained on some domains faces a real shift on the held-out one.
"""

import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from PIL import Image
from scipy import ndimage
from scipy.spatial.distance import pdist
from structlog import get_logger

from src.core.config import SyntheticConfig
from src.core.errors import ConfigError, OutputExistsError

from .dataset import COLUMNS, MARKET_SPLIT_DIRS, ReidDataset, relabel_identities

logger = get_logger()

MAX_COLOUR_ATTEMPTS = 100


@dataclass
class Appearance:
    """Identity-level traits shared by all images of one person."""

    head: np.ndarray
    torso: np.ndarray
    legs: np.ndarray
    accent: np.ndarray
    torso_width: float
    leg_gap: float
    stripe: bool
    bag: bool

    def signature(self) -> np.ndarray:
        return np.concatenate([self.torso, self.legs, self.accent])


@dataclass
class DomainStyle:
    hue_shift: float
    contrast: float
    brightness: float
    texture: float
    noise: float


@dataclass
class SyntheticSuite:
    """Training domains plus the held-out query and gallery splits."""

    sources: list[ReidDataset]
    query: ReidDataset
    gallery: ReidDataset


def domain_style(config: SyntheticConfig, index: int) -> DomainStyle:
    return DomainStyle(
        hue_shift=config.hue_shifts[index],
        contrast=config.contrasts[index],
        brightness=config.brightness[index],
        texture=config.textures[index],
        noise=config.noise_levels[index],
    )


def sample_appearances(
    count: int, rng: np.random.Generator, min_gap: float
) -> list[Appearance]:
    """Identities whose clothing colours differ by at least ``min_gap`` in some channel."""
    appearances: list[Appearance] = []
    for _ in range(count):
        for _ in range(MAX_COLOUR_ATTEMPTS):
            candidate = Appearance(
                head=rng.uniform([150, 110, 80], [235, 190, 160]),
                torso=rng.uniform(20, 235, size=3),
                legs=rng.uniform(20, 235, size=3),
                accent=rng.uniform(20, 235, size=3),
                torso_width=float(rng.uniform(0.5, 0.8)),
                leg_gap=float(rng.uniform(0.02, 0.1)),
                stripe=bool(rng.random() < 0.5),
                bag=bool(rng.random() < 0.4),
            )
            signature = candidate.signature()
            if all(np.abs(signature - a.signature()).max() >= min_gap for a in appearances):
                break
        appearances.append(candidate)
    return appearances


def hue_rotation(degrees: float) -> np.ndarray:
    """3x3 matrix rotating RGB colours about the grey axis."""
    theta = np.deg2rad(degrees)
    cos, sin = np.cos(theta), np.sin(theta)
    axis = np.ones(3) / np.sqrt(3.0)
    cross = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return cos * np.eye(3) + sin * cross + (1 - cos) * np.outer(axis, axis)


def render_person(
    appearance: Appearance,
    camera: int,
    height: int,
    width: int,
    style: DomainStyle,
    rng: np.random.Generator,
) -> np.ndarray:
    """One [H, W, 3] uint8 image of ``appearance`` seen by ``camera`` in a domain's style."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)

    # Viewpoint: cameras differ in placement and zoom, images jitter around that
    scale = (1.0 - 0.08 * ((camera - 1) % 2)) * rng.uniform(0.95, 1.05)
    center_x = width / 2 + 0.08 * width * (((camera - 1) % 3) - 1) + rng.normal(0, 0.03 * width)
    figure_height = 0.9 * height * scale
    top = 0.05 * height + (0.9 * height - figure_height) / 2 + rng.normal(0, 0.02 * height)
    gain = 1.0 + 0.08 * (1 if camera % 2 else -1)

    background = rng.uniform(70, 170) + rng.uniform(-20, 20, size=3)
    texture = ndimage.gaussian_filter(rng.normal(size=(height, width, 3)), sigma=(2, 2, 0))
    canvas = background + style.texture * 60.0 * texture

    half_torso = appearance.torso_width * width / 2 * scale
    torso_top, torso_bottom = top + 0.17 * figure_height, top + 0.56 * figure_height
    legs_bottom = top + 0.97 * figure_height
    head_radius = min(0.08 * figure_height, 0.25 * width)
    gap = appearance.leg_gap * width

    head = (yy - (top + 0.09 * figure_height)) ** 2 + (xx - center_x) ** 2 <= head_radius**2
    torso = (yy >= torso_top) & (yy < torso_bottom) & (np.abs(xx - center_x) <= half_torso)
    legs = (
        (yy >= torso_bottom)
        & (yy < legs_bottom)
        & (np.abs(xx - center_x) >= gap)
        & (np.abs(xx - center_x) <= 0.8 * half_torso)
    )
    canvas[head] = appearance.head
    canvas[torso] = appearance.torso
    canvas[legs] = appearance.legs
    if appearance.stripe:
        middle = (torso_top + torso_bottom) / 2
        canvas[torso & (np.abs(yy - middle) <= 0.03 * figure_height)] = appearance.accent
    if appearance.bag:
        bag = (
            (yy >= torso_top + 0.1 * figure_height)
            & (yy < torso_bottom)
            & (xx > center_x + half_torso)
            & (xx <= center_x + half_torso + 0.12 * width)
        )
        canvas[bag] = appearance.accent

    canvas = canvas * gain
    canvas = canvas @ hue_rotation(style.hue_shift).T
    canvas = (canvas - 128.0) * style.contrast + 128.0 + style.brightness
    canvas = canvas + rng.normal(0, style.noise, size=canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def image_name(raw_pid: int, camera: int, frame: int) -> str:
    return f"{raw_pid:04d}_c{camera}s1_{frame:06d}_00.png"


def _render_identities(
    config: SyntheticConfig, style_index: int, num_ids: int, domain: int
) -> tuple[pd.DataFrame, np.ndarray]:
    rng = np.random.default_rng([config.seed, style_index])
    style = domain_style(config, style_index)
    appearances = sample_appearances(num_ids, rng, config.min_colour_gap)

    rows, images = [], []
    for index, appearance in enumerate(appearances):
        raw_pid = index + 1
        for frame in range(config.images_per_id):
            camera = frame % config.num_cameras + 1
            images.append(
                render_person(appearance, camera, config.height, config.width, style, rng)
            )
            rows.append((image_name(raw_pid, camera, frame), raw_pid, camera, domain))
    return pd.DataFrame(rows, columns=COLUMNS), np.stack(images)


def domain_channel_means(suite: SyntheticSuite) -> np.ndarray:
    """[K + 1, 3] mean RGB level of every training domain, then of the held-out domain."""
    held_out = np.concatenate([suite.query.images, suite.gallery.images])
    domains = [*(s.images for s in suite.sources), held_out]
    return np.stack([images.reshape(-1, 3).mean(axis=0) for images in domains])


def smallest_domain_gap(means: np.ndarray) -> float:
    """Smallest Euclidean distance between two rows of ``means``."""
    if len(means) < 2:
        return float("inf")
    return float(pdist(means).min())


def generate_synthetic(
    config: SyntheticConfig, source_names: list[str] | None = None, target_name: str = "target"
) -> SyntheticSuite:
    """Render every training domain and the held-out domain in memory.

    The held-out domain uses style entry ``num_domains``. Its query split has
    each identity's first camera-1 image; the gallery has the rest.
    """
    names = source_names or [f"source_{k}" for k in range(config.num_domains)]
    if len(names) != config.num_domains:
        raise ValueError(f"{len(names)} source names for {config.num_domains} domains")

    sources = []
    for domain, name in enumerate(names):
        records, images = _render_identities(config, domain, config.ids_per_domain, domain)
        sources.append(ReidDataset(relabel_identities(records), "train", name, images))

    held_out = config.num_domains
    records, images = _render_identities(config, held_out, config.target_ids, held_out)
    is_query = ~records.duplicated("pid") & (records["camid"] == 1)
    query_idx = np.flatnonzero(is_query.to_numpy())
    gallery_idx = np.flatnonzero(~is_query.to_numpy())
    query = ReidDataset(records.iloc[query_idx], "query", target_name, images[query_idx])
    gallery = ReidDataset(records.iloc[gallery_idx], "gallery", target_name, images[gallery_idx])
    suite = SyntheticSuite(sources, query, gallery)

    gap = smallest_domain_gap(domain_channel_means(suite))
    if gap < config.min_domain_gap:
        raise ConfigError(
            f"Domain styles too close: channel means differ by {gap:.2f}, "
            f"need at least {config.min_domain_gap}"
        )

    logger.info(
        "Generated synthetic domains",
        domains=config.num_domains,
        train_images=sum(len(s) for s in sources),
        query=len(query),
        gallery=len(gallery),
        domain_gap=round(gap, 2),
    )
    return suite


def _write_split(dataset: ReidDataset, directory: Path) -> None:
    if directory.exists():
        shutil.rmtree(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name, image in zip(dataset.paths, dataset.images):
        Image.fromarray(image).save(directory / Path(name).name, format="PNG")


def write_synthetic(suite: SyntheticSuite, root: str | Path, force: bool = False) -> list[Path]:
    """Write the suite as Market-style directory trees under ``root``.

    Returns:
        The dataset directories written (sources first, then the target)
    """
    root = Path(root)
    targets = [root / s.name for s in suite.sources] + [root / suite.query.name]
    existing = [t for t in targets if t.exists() and any(t.iterdir())]
    if existing and not force:
        raise OutputExistsError(
            f"Dataset directory {existing[0]} already exists; pass --force to overwrite"
        )

    for source in suite.sources:
        _write_split(source, root / source.name / MARKET_SPLIT_DIRS["train"])
    _write_split(suite.query, root / suite.query.name / MARKET_SPLIT_DIRS["query"])
    _write_split(suite.gallery, root / suite.gallery.name / MARKET_SPLIT_DIRS["gallery"])

    logger.info("Wrote synthetic datasets", root=str(root), datasets=len(targets))
    return targets
