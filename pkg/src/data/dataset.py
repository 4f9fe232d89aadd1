"""Labeled person image collections and the loaders that read them from disk."""

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError
from structlog import get_logger

from src.core.errors import DataError

logger = get_logger()

Split = Literal["train", "query", "gallery"]

COLUMNS = ["path", "pid", "camid", "domain"]
IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png"}

# Market-style file names: <pid>_c<camera>s<sequence>_<frame>_<box>.jpg, pid -1 marks junk
MARKET_PATTERN = re.compile(r"^(-?\d+)_c(\d+)(?:s\d+)?_\d+_\d+$")
MARKET_SPLIT_DIRS: dict[str, str] = {
    "train": "bounding_box_train",
    "query": "query",
    "gallery": "bounding_box_test",
}


class ImageRecord(BaseModel):
    """One row of a CSV-layout split file."""

    path: str = Field(min_length=1)
    identity: int = Field(ge=0)
    camera: int = Field(ge=0)
    domain: int = Field(default=0, ge=0)


@dataclass
class ReidDataset:
    """Image paths with identity, camera and domain labels.

    ``records`` has the columns ``path``, ``pid``, ``camid`` and ``domain``.
    Training splits carry densely relabelled pids (``raw_pid`` keeps the
    original); query and gallery splits keep raw pids so they match each
    other. ``images`` optionally holds decoded uint8 images in record order.
    """

    records: pd.DataFrame
    split: Split = "train"
    name: str = ""
    images: np.ndarray | None = None

    def __post_init__(self) -> None:
        missing = [c for c in COLUMNS if c not in self.records.columns]
        if missing:
            raise ValueError(f"Dataset records are missing columns {missing}")
        self.records = self.records.reset_index(drop=True)
        if self.images is not None and len(self.images) != len(self.records):
            raise ValueError(
                f"{len(self.images)} in-memory images for {len(self.records)} records"
            )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def pids(self) -> np.ndarray:
        return self.records["pid"].to_numpy(dtype=np.int64)

    @property
    def camids(self) -> np.ndarray:
        return self.records["camid"].to_numpy(dtype=np.int64)

    @property
    def domains(self) -> np.ndarray:
        return self.records["domain"].to_numpy(dtype=np.int64)

    @property
    def paths(self) -> list[str]:
        return self.records["path"].tolist()

    @property
    def num_ids(self) -> int:
        return int(self.records["pid"].nunique())

    @property
    def num_domains(self) -> int:
        return int(self.records["domain"].nunique())

    def class_indices(self) -> dict[int, np.ndarray]:
        """Record indices of every identity, keyed by pid in ascending order."""
        groups = self.records.groupby("pid", sort=True).indices
        return {int(pid): np.asarray(idx, dtype=np.int64) for pid, idx in groups.items()}

    def subset(self, indices: np.ndarray | list[int], name: str | None = None) -> "ReidDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return ReidDataset(
            records=self.records.iloc[indices].reset_index(drop=True),
            split=self.split,
            name=self.name if name is None else name,
            images=None if self.images is None else self.images[indices],
        )

    def by_domain(self) -> dict[int, "ReidDataset"]:
        """One dataset per domain label, in ascending domain order."""
        return {
            int(domain): self.subset(idx, f"{self.name}[domain={domain}]")
            for domain, idx in self.records.groupby("domain", sort=True).indices.items()
        }


def relabel_identities(records: pd.DataFrame) -> pd.DataFrame:
    """Dense 0..N-1 pids in ascending raw-id order; the original goes to ``raw_pid``."""
    records = records.copy()
    records["raw_pid"] = records["pid"]
    codes, _ = pd.factorize(records["pid"], sort=True)
    records["pid"] = codes.astype(np.int64)
    return records


def parse_market_name(filename: str) -> tuple[int, int] | None:
    """(pid, camera) from a Market-style file name, or None if it does not match."""
    match = MARKET_PATTERN.match(Path(filename).stem)
    if not match:
        return None
    return int(match.group(1)), int(match.group(2))


def camera_domains(records: pd.DataFrame) -> pd.DataFrame:
    """Treat every (domain, camera) pair as its own domain, numbered densely in sorted order."""
    records = records.copy()
    records["domain"] = records.groupby(["domain", "camid"], sort=True).ngroup().astype(np.int64)
    return records


def _read_market(root: Path, split: Split, domain: int) -> pd.DataFrame:
    directory = root / MARKET_SPLIT_DIRS[split]
    if not directory.is_dir():
        raise DataError(f"Missing split directory: {directory}")

    rows = []
    for path in sorted(directory.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        parsed = parse_market_name(path.name)
        if parsed is None:
            raise DataError(f"Cannot parse identity and camera from file name: {path}")
        pid, camid = parsed
        if pid < 0:
            continue
        rows.append((str(path), pid, camid, domain))
    return pd.DataFrame(rows, columns=COLUMNS)


def _read_csv(root: Path, split: Split) -> pd.DataFrame:
    csv_path = root if root.is_file() else root / f"{split}.csv"
    if not csv_path.is_file():
        raise DataError(f"Missing split file: {csv_path}")
    try:
        frame = pd.read_csv(csv_path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DataError(f"Unreadable split file {csv_path}: {e}") from e

    rows = []
    for line, row in enumerate(frame.to_dict(orient="records"), start=2):
        try:
            record = ImageRecord.model_validate(row)
        except ValidationError as e:
            raise DataError(f"{csv_path}:{line}: invalid record: {e}") from e
        path = Path(record.path)
        if not path.is_absolute():
            path = csv_path.parent / path
        rows.append((str(path), record.identity, record.camera, record.domain))
    return pd.DataFrame(rows, columns=COLUMNS)


def load_dataset(
    root: str | Path,
    layout: Literal["market", "csv"] = "market",
    split: Split = "train",
    domain: int = 0,
    camera_as_domain: bool = False,
) -> ReidDataset:
    """Read one split of a dataset.

    Args:
        root: dataset directory (market) or directory/CSV file (csv)
        layout: ``market`` parses labels from file names; ``csv`` reads
            ``path,identity,camera,domain`` rows
        split: train, query or gallery
        domain: domain label for market-layout records
        camera_as_domain: replace domain labels with dense camera indices

    Returns:
        Dataset; training splits are relabelled to dense pids
    """
    root = Path(root)
    if not root.exists():
        raise DataError(f"Dataset root not found: {root}")

    records = _read_market(root, split, domain) if layout == "market" else _read_csv(root, split)
    if records.empty:
        raise DataError(f"No usable images in {split} split of {root}")
    if camera_as_domain:
        records = camera_domains(records)
    if split == "train":
        records = relabel_identities(records)

    dataset = ReidDataset(records, split=split, name=root.name)
    logger.info(
        "Loaded dataset",
        root=str(root),
        split=split,
        images=len(dataset),
        identities=dataset.num_ids,
        cameras=int(records["camid"].nunique()),
    )
    return dataset


def hybrid_view(datasets: list[ReidDataset], name: str = "hybrid") -> ReidDataset:
    """Union of training sets with pids offset so identities never collide.

    Domain labels are kept for bookkeeping only.
    """
    if not datasets:
        raise ValueError("hybrid_view needs at least one dataset")
    frames, offset = [], 0
    for dataset in datasets:
        frame = dataset.records.copy()
        frame["pid"] = frame["pid"] + offset
        offset = int(frame["pid"].max()) + 1
        frames.append(frame)

    with_images = [d.images is not None for d in datasets]
    if any(with_images) and not all(with_images):
        raise ValueError("Cannot mix in-memory and on-disk datasets in one hybrid view")
    images = np.concatenate([d.images for d in datasets]) if all(with_images) else None

    return ReidDataset(pd.concat(frames, ignore_index=True), split="train", name=name, images=images)
