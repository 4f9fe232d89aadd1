"""Identity-balanced batch samplers.

The graph sampler links every identity to its most similar identities under
the current model and builds batches from an anchor identity and its
neighbours, so each batch is full of hard negatives.
"""

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np
from structlog import get_logger

from src.core.config import SamplerConfig
from src.data.dataset import ReidDataset

logger = get_logger()

# Maps prototype record indices (one per class, ascending pid) to a C x C score matrix
PrototypeScorer = Callable[[np.ndarray], np.ndarray]


@dataclass
class ClassGraph:
    """Nearest-neighbour lists over identities.

    ``neighbors[c]`` holds class labels ordered from most to least similar
    to ``classes[c]``; a class is never its own neighbour.
    """

    classes: np.ndarray
    neighbors: np.ndarray

    def neighbors_of(self, label: int) -> np.ndarray:
        position = int(np.searchsorted(self.classes, label))
        if position >= len(self.classes) or self.classes[position] != label:
            raise KeyError(f"Unknown class {label}")
        return self.neighbors[position]


def nearest_classes(similarity: np.ndarray, num_neighbors: int) -> np.ndarray:
    """Column indices of the ``num_neighbors`` highest scores per row, self excluded.

    Equal scores keep their column order.
    """
    size = similarity.shape[0]
    if similarity.shape != (size, size):
        raise ValueError(f"Similarity must be square, got {similarity.shape}")
    if not 1 <= num_neighbors <= size - 1:
        raise ValueError(f"num_neighbors must be in [1, {size - 1}], got {num_neighbors}")
    masked = similarity.astype(np.float64, copy=True)
    np.fill_diagonal(masked, -np.inf)
    return np.argsort(-masked, axis=1, kind="stable")[:, :num_neighbors]


def build_class_graph(
    dataset: ReidDataset,
    scorer: PrototypeScorer,
    num_neighbors: int,
    rng: np.random.Generator,
    min_classes: int = 2,
) -> ClassGraph:
    """Score one random prototype image per identity and link each to its nearest identities.

    Args:
        dataset: training images with identity labels
        scorer: returns the C x C prototype score matrix for given record indices
        num_neighbors: neighbours kept per class, capped at C - 1
        rng: source of prototype choices
        min_classes: fewest identities a batch needs

    Returns:
        Graph over the dataset's identities
    """
    groups = dataset.class_indices()
    classes = np.array(sorted(groups), dtype=np.int64)
    if len(classes) < max(2, min_classes):
        raise ValueError(
            f"Dataset {dataset.name!r} has {len(classes)} identities; a batch needs {min_classes}"
        )
    prototypes = np.array([rng.choice(groups[int(c)]) for c in classes], dtype=np.int64)
    similarity = np.asarray(scorer(prototypes))
    neighbors = classes[nearest_classes(similarity, min(num_neighbors, len(classes) - 1))]
    return ClassGraph(classes, neighbors)


def draw_instances(indices: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` images of one identity; repeats only when the identity has too few."""
    return rng.choice(indices, size=count, replace=len(indices) < count)


class GraphSampler:
    """Anchor identity plus its nearest neighbours, a fixed number of images each."""

    def __init__(self, dataset: ReidDataset, config: SamplerConfig, graph: ClassGraph) -> None:
        self.dataset = dataset
        self.config = config
        self.graph = graph
        self.groups = dataset.class_indices()
        if len(graph.classes) < config.num_identities:
            raise ValueError(
                f"{len(graph.classes)} identities cannot fill {config.num_identities} per batch"
            )
        if graph.neighbors.shape[1] < config.num_identities - 1:
            raise ValueError("Graph has too few neighbours per class for the batch composition")

    def next_batch(self, rng: np.random.Generator) -> np.ndarray:
        """Record indices of one batch, grouped by identity."""
        anchor = rng.integers(len(self.graph.classes))
        members = [
            int(self.graph.classes[anchor]),
            *(int(c) for c in self.graph.neighbors[anchor][: self.config.num_identities - 1]),
        ]
        return np.concatenate(
            [draw_instances(self.groups[c], self.config.num_instances, rng) for c in members]
        )


class RandomIdentitySampler:
    """Uniformly chosen identities, a fixed number of images each."""

    def __init__(self, dataset: ReidDataset, config: SamplerConfig) -> None:
        self.dataset = dataset
        self.config = config
        self.groups = dataset.class_indices()
        self.classes = np.array(sorted(self.groups), dtype=np.int64)
        if len(self.classes) < config.num_identities:
            raise ValueError(
                f"{len(self.classes)} identities cannot fill {config.num_identities} per batch"
            )

    def next_batch(self, rng: np.random.Generator) -> np.ndarray:
        members = rng.choice(self.classes, size=self.config.num_identities, replace=False)
        return np.concatenate(
            [draw_instances(self.groups[int(c)], self.config.num_instances, rng) for c in members]
        )


def make_sampler(
    dataset: ReidDataset,
    config: SamplerConfig,
    scorer: PrototypeScorer,
    rng: np.random.Generator,
) -> GraphSampler | RandomIdentitySampler:
    """Sampler of the configured kind; graph samplers score prototypes with ``scorer``."""
    if config.kind == "random":
        return RandomIdentitySampler(dataset, config)
    graph = build_class_graph(dataset, scorer, config.num_neighbors, rng, config.num_identities)
    logger.debug(
        "Built class graph",
        dataset=dataset.name,
        classes=len(graph.classes),
        neighbors=graph.neighbors.shape[1],
    )
    return GraphSampler(dataset, config, graph)
