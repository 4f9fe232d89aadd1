"""Three-phase training of the two-stream model.

Phase A trains the shared convolutions, one expert's DSBN parameters and the
DS matching head on a batch from that expert's domain. Phase B trains only
the domain-adaptive matcher on hybrid batches with every backbone input
frozen. Phase C trains only the invariant normalization and the DI head on
hybrid batches; gradients pass through the frozen convolutions but never
update them.
"""

import shutil
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Literal

import numpy as np
import pandas as pd
import torch
from structlog import get_logger
from torch import Tensor

from src.core.config import ExperimentConfig, TrainConfig, config_hash
from src.core.errors import ConfigError
from src.data.dataset import ReidDataset
from src.data.transforms import BatchBuilder
from src.models.tal import (
    BACKBONE_CONV,
    DI_HEAD,
    DI_NORM,
    DS_HEAD,
    MSDA,
    LabeledImages,
    TwoStreamModel,
    dsbn_group,
    pairwise_scores,
)

from .checkpoint import load_checkpoint, restore_rng, save_checkpoint
from .loss import LabeledSimilarityBatch, batch_hard_triplet
from .sampler import ClassGraph, GraphSampler, RandomIdentitySampler, make_sampler

logger = get_logger()

Phase = Literal["A", "B", "C"]
PHASES: tuple[Phase, ...] = ("A", "B", "C")

METRICS_FILE = "metrics.jsonl"
CHECKPOINT_DIR = "checkpoints"
LAST_CHECKPOINT = "last.pt"


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Step schedule for a 1-based epoch: ``lr`` until ``decay_epoch``, then divided once."""
    if epoch > config.decay_epoch:
        return config.lr / config.decay_factor
    return config.lr


@dataclass
class TrainingBatch:
    images: Tensor
    pids: Tensor
    domains: Tensor


@dataclass
class StepResult:
    phase: Phase
    loss: float
    active_fraction: float
    domain: int | None = None


class IsolationError(RuntimeError):
    """A training step changed a parameter group that its phase must not touch."""


class Trainer:
    """Owns the model, optimizer, samplers and random state of one training run."""

    def __init__(
        self,
        config: ExperimentConfig,
        training_set: ReidDataset,
        output_dir: str | Path | None = None,
        check_isolation: bool = False,
    ) -> None:
        """Initialize the trainer.

        Args:
            config: validated experiment config
            training_set: hybrid training data; the ``domain`` column must hold 0..K-1
            output_dir: where checkpoints and metrics go; None keeps everything in memory
            check_isolation: hash untouched parameter groups around every step
        """
        domains = np.unique(training_set.domains)
        if len(domains) == 0 or not np.array_equal(domains, np.arange(len(domains))):
            raise ValueError(f"Training domains must be numbered 0..K-1, got {domains.tolist()}")

        self.config = config
        self.training_set = training_set
        self.num_domains = len(domains)
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.check_isolation = check_isolation

        torch.manual_seed(config.seed)
        self.rng = np.random.default_rng(config.seed)
        self.model = TwoStreamModel(config, self.num_domains)
        self.optimizer = torch.optim.SGD(
            self.model.parameters(),
            lr=config.train.lr,
            momentum=config.train.momentum,
            weight_decay=config.train.weight_decay,
        )

        height, width = config.backbone.height, config.backbone.width
        self.domain_sets = training_set.by_domain()
        self.domain_builders = {
            k: BatchBuilder(d, config.data, height, width) for k, d in self.domain_sets.items()
        }
        self.hybrid_builder = BatchBuilder(training_set, config.data, height, width)
        self.domain_samplers: dict[int, GraphSampler | RandomIdentitySampler] = {}
        self.hybrid_sampler: GraphSampler | RandomIdentitySampler | None = None

        self.epoch = 0
        self.history: list[dict[str, Any]] = []

        logger.info(
            "Trainer ready",
            domains=self.num_domains,
            identities=training_set.num_ids,
            images=len(training_set),
            norm_mode=config.backbone.norm_mode,
            aggregation=config.matching.aggregation,
        )

    # Phase steps

    def _begin(self, groups: list[str]) -> dict[str, str]:
        self.model.train()
        self.model.set_trainable(groups)
        self.optimizer.zero_grad(set_to_none=True)
        if not self.check_isolation:
            return {}
        return {
            name: self.model.group_digest(name)
            for name in self.model.group_names()
            if name not in groups
        }

    def _finish(
        self,
        phase: Phase,
        scores: Tensor,
        pids: Tensor,
        frozen: dict[str, str],
        domain: int | None = None,
    ) -> StepResult:
        result = batch_hard_triplet(
            LabeledSimilarityBatch(scores, pids, self.config.train.margin),
            self.config.train.loss_reduction,
        )
        result.loss.backward()
        self.optimizer.step()

        changed = [name for name, digest in frozen.items() if self.model.group_digest(name) != digest]
        if changed:
            raise IsolationError(f"Phase {phase} step modified frozen groups {changed}")
        return StepResult(phase, float(result.loss.detach()), result.active_fraction, domain)

    def phase_a_step(self, batch: TrainingBatch) -> StepResult:
        """Expert step on a single-domain batch."""
        present = torch.unique(batch.domains)
        if present.numel() != 1:
            raise ValueError(f"Phase A needs a single-domain batch, got domains {present.tolist()}")
        domain = int(present[0])
        frozen = self._begin([BACKBONE_CONV, dsbn_group(domain), DS_HEAD])
        scores = self.model.expert_scores(batch.images, domain)
        return self._finish("A", scores, batch.pids, frozen, domain)

    def phase_b_step(self, batch: TrainingBatch) -> StepResult:
        """Domain-adaptive matcher step; expert features are computed without gradients."""
        frozen = self._begin([MSDA])
        with torch.no_grad():
            features = self.model.features(batch.images, "ds")
        scores = self.model.msda_matcher(features, features)
        return self._finish("B", scores, batch.pids, frozen)

    def phase_c_step(self, batch: TrainingBatch) -> StepResult:
        """Invariant-stream step."""
        frozen = self._begin([DI_NORM, DI_HEAD])
        features = self.model.features(batch.images, "di")
        scores = self.model.di_matcher(features, features)
        return self._finish("C", scores, batch.pids, frozen)

    # Sampling

    def _scorer(self, dataset: ReidDataset, builder: BatchBuilder, domain: int | None = None):
        batch_size = self.config.evaluation.batch_size

        def score(indices: np.ndarray) -> np.ndarray:
            images = builder.batch(indices)
            if domain is not None:
                was_training = self.model.training
                self.model.eval()
                with torch.no_grad():
                    scores = self.model.expert_scores(images, domain).cpu().numpy()
                self.model.train(was_training)
                return scores
            labeled = LabeledImages(
                images, dataset.pids[indices], dataset.camids[indices], dataset.domains[indices]
            )
            stream = "di" if self.model.has_invariant_stream else "ds"
            return pairwise_scores(self.model, labeled, None, stream, batch_size).scores

        return score

    def refresh_samplers(self) -> None:
        """Rebuild class graphs from the current model."""
        sampler_config = self.config.sampler
        self.domain_samplers = {
            k: make_sampler(
                dataset, sampler_config, self._scorer(dataset, self.domain_builders[k], k), self.rng
            )
            for k, dataset in self.domain_sets.items()
        }
        self.hybrid_sampler = make_sampler(
            self.training_set,
            sampler_config,
            self._scorer(self.training_set, self.hybrid_builder),
            self.rng,
        )

    def _draw(self, dataset: ReidDataset, builder: BatchBuilder, sampler) -> TrainingBatch:
        indices = sampler.next_batch(self.rng)
        return TrainingBatch(
            images=builder.batch(indices, self.rng),
            pids=torch.as_tensor(dataset.pids[indices]),
            domains=torch.as_tensor(dataset.domains[indices]),
        )

    # Schedule

    def phase_plan(self, iterations: int) -> list[tuple[Phase, int | None]]:
        """Ordered (phase, domain) steps of one epoch.

        Phase A cycles through the domains. Phase B is skipped under voting
        aggregation and phase C when there is no invariant stream.
        """
        steps_a, steps_b, steps_c = self.config.train.phase_steps
        if self.config.matching.aggregation == "voting":
            steps_b = 0
        if not self.model.has_invariant_stream:
            steps_c = 0

        plan: list[tuple[Phase, int | None]] = []
        expert = 0

        def add(phase: Phase, count: int) -> None:
            nonlocal expert
            for _ in range(count):
                if phase == "A":
                    plan.append(("A", expert % self.num_domains))
                    expert += 1
                else:
                    plan.append((phase, None))

        if self.config.train.schedule == "staged":
            add("A", iterations * steps_a)
            add("B", iterations * steps_b)
            add("C", iterations * steps_c)
        else:
            for _ in range(iterations):
                add("A", steps_a)
                add("B", steps_b)
                add("C", steps_c)
        return plan

    def iterations_per_epoch(self) -> int:
        configured = self.config.train.iters_per_epoch
        if configured is not None:
            return configured
        return max(1, len(self.training_set) // self.config.sampler.batch_size)

    def step(self, phase: Phase, domain: int | None) -> StepResult:
        if phase == "A":
            batch = self._draw(
                self.domain_sets[domain], self.domain_builders[domain], self.domain_samplers[domain]
            )
            return self.phase_a_step(batch)
        batch = self._draw(self.training_set, self.hybrid_builder, self.hybrid_sampler)
        return self.phase_b_step(batch) if phase == "B" else self.phase_c_step(batch)

    def train_epoch(self) -> list[dict[str, Any]]:
        """Run one epoch and return its per-phase summary rows."""
        epoch = self.epoch + 1
        lr = learning_rate(self.config.train, epoch)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        if self.hybrid_sampler is None or (epoch - 1) % self.config.sampler.refresh_epochs == 0:
            self.refresh_samplers()

        results: dict[Phase, list[StepResult]] = defaultdict(list)
        for phase, domain in self.phase_plan(self.iterations_per_epoch()):
            results[phase].append(self.step(phase, domain))

        rows = []
        for phase in PHASES:
            if not results[phase]:
                continue
            row = {
                "epoch": epoch,
                "phase": phase,
                "steps": len(results[phase]),
                "loss": float(np.mean([r.loss for r in results[phase]])),
                "active_fraction": float(np.mean([r.active_fraction for r in results[phase]])),
                "lr": lr,
            }
            logger.info("Epoch phase finished", **row)
            rows.append(row)
        self.history.extend(rows)
        self.epoch = epoch
        return rows

    # Persistence

    def sampler_state(self) -> dict[str, list[list[int]]]:
        """Class graphs in checkpointable form."""
        state = {}
        samplers = {**{str(k): s for k, s in self.domain_samplers.items()}, "hybrid": self.hybrid_sampler}
        for name, sampler in samplers.items():
            if isinstance(sampler, GraphSampler):
                state[name] = [
                    sampler.graph.classes.tolist(),
                    *sampler.graph.neighbors.tolist(),
                ]
        return state

    def _restore_samplers(self, state: dict[str, list[list[int]]]) -> None:
        if self.config.sampler.kind == "random":
            self.domain_samplers = {
                k: RandomIdentitySampler(d, self.config.sampler) for k, d in self.domain_sets.items()
            }
            self.hybrid_sampler = RandomIdentitySampler(self.training_set, self.config.sampler)
            return
        if not state:
            return

        def graph(rows: list[list[int]]) -> ClassGraph:
            return ClassGraph(np.array(rows[0], dtype=np.int64), np.array(rows[1:], dtype=np.int64))

        self.domain_samplers = {
            k: GraphSampler(d, self.config.sampler, graph(state[str(k)]))
            for k, d in self.domain_sets.items()
        }
        self.hybrid_sampler = GraphSampler(self.training_set, self.config.sampler, graph(state["hybrid"]))

    def save(self) -> Path:
        if self.output_dir is None:
            raise ValueError("Trainer has no output directory")
        directory = self.output_dir / CHECKPOINT_DIR
        path = save_checkpoint(
            directory / f"epoch_{self.epoch:03d}.pt",
            config=self.config,
            num_domains=self.num_domains,
            epoch=self.epoch,
            model=self.model,
            optimizer=self.optimizer,
            rng=self.rng,
            history=self.history,
            samplers=self.sampler_state(),
        )
        shutil.copyfile(path, directory / LAST_CHECKPOINT)
        return path

    def write_metrics(self) -> Path:
        path = self.output_dir / METRICS_FILE
        pd.DataFrame(self.history).to_json(path, orient="records", lines=True)
        return path

    def resume(self, path: str | Path) -> None:
        """Restore model, optimizer, samplers and random state from a checkpoint of this run."""
        payload, config = load_checkpoint(path)
        if config_hash(config) != config_hash(self.config):
            raise ConfigError(f"Checkpoint {path} was trained with a different config")
        if payload["num_domains"] != self.num_domains:
            raise ConfigError(
                f"Checkpoint has {payload['num_domains']} domains, training data has {self.num_domains}"
            )
        self.model.load_state_dict(payload["model"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.rng = restore_rng(payload)
        torch.set_rng_state(payload["torch_rng"])
        self.epoch = payload["epoch"]
        self.history = list(payload["history"])
        self._restore_samplers(payload.get("samplers", {}))
        logger.info("Resumed training", checkpoint=str(path), epoch=self.epoch)

    def fit(self) -> Path | None:
        """Train until the configured epoch count.

        Returns:
            Path of the last checkpoint written, or None without an output directory
        """
        total = self.config.train.epochs
        last = None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)
        while self.epoch < total:
            self.train_epoch()
            if self.output_dir is None:
                continue
            self.write_metrics()
            if self.epoch % self.config.train.checkpoint_every == 0 or self.epoch == total:
                last = self.save()
        if last is None and self.output_dir is not None:
            last = self.output_dir / CHECKPOINT_DIR / LAST_CHECKPOINT
        logger.info("Training finished", epochs=self.epoch, checkpoint=str(last) if last else None)
        return last
