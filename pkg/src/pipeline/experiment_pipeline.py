"""Wires config, data, training and evaluation for the command-line entry point."""

from pathlib import Path

import numpy as np
import pandas as pd
from structlog import get_logger

from src.core.config import ExperimentConfig, FusionMode, dump_config
from src.core.errors import ConfigError, OutputExistsError
from src.data.dataset import ReidDataset, camera_domains, hybrid_view, load_dataset
from src.data.synthetic import generate_synthetic, write_synthetic
from src.evaluation.evaluator import EvaluationReport, evaluate
from src.experiments.ablation import Axis, run_ablation
from src.training.trainer import CHECKPOINT_DIR, LAST_CHECKPOINT, Trainer

logger = get_logger()

EFFECTIVE_CONFIG = "effective_config.env"


class ExperimentPipeline:
    """One command's view of an experiment: its config and its output directory."""

    def __init__(
        self, config: ExperimentConfig, output_dir: str | Path, data_root: str | Path | None = None
    ) -> None:
        """Initialize the pipeline.

        Args:
            config: validated experiment config
            output_dir: base for every relative path and all artifacts
            data_root: dataset root overriding ``DATA__ROOT``
        """
        self.config = config
        self.output_dir = Path(output_dir)
        self.data_root = self.resolve(data_root if data_root is not None else config.data.root)

    def resolve(self, path: str | Path) -> Path:
        path = Path(path)
        return path if path.is_absolute() else self.output_dir / path

    def write_effective_config(self) -> Path:
        return dump_config(self.config, self.output_dir / EFFECTIVE_CONFIG)

    # Data

    def generate_data(self, force: bool = False) -> list[Path]:
        """Render the synthetic domains into the data root."""
        data = self.config.data
        if data.synthetic.num_domains != len(data.sources):
            raise ConfigError(
                f"DATA__SYNTHETIC__NUM_DOMAINS={data.synthetic.num_domains} but "
                f"{len(data.sources)} source names are configured"
            )
        suite = generate_synthetic(data.synthetic, data.sources, data.target)
        paths = write_synthetic(suite, self.data_root, force=force)
        self.write_effective_config()
        return paths

    def load_training_set(self) -> ReidDataset:
        """Hybrid training set with domains numbered 0..K-1."""
        data = self.config.data
        sources = [
            load_dataset(self.data_root / name, data.layout, "train", domain=k)
            for k, name in enumerate(data.sources)
        ]
        hybrid = hybrid_view(sources)
        records = hybrid.records
        if data.camera_as_domain:
            records = camera_domains(records)
        codes, _ = pd.factorize(records["domain"], sort=True)
        records = records.assign(domain=codes.astype(np.int64))
        logger.info(
            "Training set ready",
            domains=int(records["domain"].nunique()),
            identities=hybrid.num_ids,
            images=len(hybrid),
        )
        return ReidDataset(records, "train", hybrid.name, hybrid.images)

    def load_target(self) -> tuple[ReidDataset, ReidDataset]:
        data = self.config.data
        root = self.data_root / data.target
        query = load_dataset(root, data.layout, "query", domain=len(data.sources))
        gallery = load_dataset(root, data.layout, "gallery", domain=len(data.sources))
        return query, gallery

    # Commands

    def last_checkpoint(self) -> Path:
        return self.output_dir / CHECKPOINT_DIR / LAST_CHECKPOINT

    def train(self, resume: bool = False, force: bool = False) -> Path:
        """Train from scratch, or continue from this run's last checkpoint."""
        last = self.last_checkpoint()
        if resume and not last.is_file():
            raise ConfigError(f"Nothing to resume: {last} does not exist")
        if last.is_file() and not (resume or force):
            raise OutputExistsError(
                f"{self.output_dir} already holds a training run; use --resume or --force"
            )

        trainer = Trainer(self.config, self.load_training_set(), self.output_dir)
        if resume:
            trainer.resume(last)
        self.write_effective_config()
        return trainer.fit()

    def evaluate(
        self,
        checkpoint: str | Path | None = None,
        fusion: FusionMode | None = None,
        per_query: bool = False,
        grid_queries: int = 0,
        correspondences: int = 0,
    ) -> EvaluationReport:
        checkpoint = self.resolve(checkpoint) if checkpoint is not None else self.last_checkpoint()
        query, gallery = self.load_target()
        _, report = evaluate(
            checkpoint,
            query,
            gallery,
            fusion=fusion,
            output_dir=self.output_dir / "eval",
            per_query=per_query,
            grid_queries=grid_queries,
            correspondences=correspondences,
        )
        return report

    def ablate(self, axis: Axis) -> pd.DataFrame:
        query, gallery = self.load_target()
        self.write_effective_config()
        return run_ablation(
            self.config, axis, self.load_training_set(), query, gallery, self.output_dir
        )
