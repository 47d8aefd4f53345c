"""Optimization loop: Adam updates, seeded shuffling, patience-based early
stopping on validation loss, and full determinism under a seed.

"Trained until convergence" is operationalized as: stop when the validation
loss has not improved for `patience` epochs (or at max_epochs), then return
the parameters from the best epoch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .classifiers import ClassifierModel, ModelInput, bce_with_logits_torch
from .data_model import CohortSplit, DiseaseLabel, Task

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# bindings(record, train=..., rng=...) -> (ModelInput, target vector)
SampleBindings = Callable[..., tuple[ModelInput, np.ndarray]]


class TrainingDiverged(RuntimeError):
    """Raised when the loss goes non-finite; carries epoch/batch context."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 20
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.patience >= self.max_epochs:
            raise ValueError(
                f"patience ({self.patience}) must be smaller than max_epochs ({self.max_epochs})"
            )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass(frozen=True)
class TrainHistory:
    epochs: tuple[EpochStats, ...]
    best_epoch: int

    @property
    def best(self) -> EpochStats:
        return self.epochs[self.best_epoch - 1]

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "val_acc"])
            for e in self.epochs:
                writer.writerow(
                    [e.epoch, f"{e.train_loss:.6f}", f"{e.val_loss:.6f}", f"{e.val_acc:.6f}"]
                )
        return path


def target_for_task(label: DiseaseLabel, task: Task) -> np.ndarray:
    """Binary target vector: TB flag, sequelae flag, or the 3 type flags."""
    task = Task(task)
    if task is Task.IDENTIFICATION:
        return np.array([label.tb], dtype=np.float32)
    if task is Task.SEQUELAE:
        if label.tb == 0:
            raise ValueError("sequelae task is undefined for tb=0 records")
        return np.array([label.sequelae], dtype=np.float32)
    return np.array(label.types, dtype=np.float32)


def _exact_match(hard: np.ndarray, targets: np.ndarray) -> float:
    return float(np.all(hard == targets, axis=1).mean())


def _evaluate_split(
    model: ClassifierModel,
    inputs: Sequence[ModelInput],
    targets: np.ndarray,
    batch_size: int,
) -> tuple[float, float]:
    """Mean loss and exact-match accuracy over a cached, preprocessed split."""
    was_training = model.net.training
    model.net.eval()
    losses = []
    hards = []
    try:
        with torch.no_grad():
            for start in range(0, len(inputs), batch_size):
                chunk = inputs[start : start + batch_size]
                t = torch.from_numpy(targets[start : start + len(chunk)])
                logits = model.batch_logits(chunk)
                losses.append(float(bce_with_logits_torch(logits, t)) * len(chunk))
                hards.append((torch.sigmoid(logits) >= 0.5).numpy().astype(np.int64))
    finally:
        model.net.train(was_training)
    hard = np.concatenate(hards, axis=0)
    return sum(losses) / len(inputs), _exact_match(hard, targets.astype(np.int64))


def train(
    model: ClassifierModel,
    cohort: CohortSplit,
    task: Task,
    config: TrainConfig,
    bindings: SampleBindings,
) -> tuple[ClassifierModel, TrainHistory]:
    """Fit the model on the cohort's train split, early-stopping on val loss.

    One epoch is one seeded shuffled pass over the train split; train-time
    augmentation draws come from a per-(epoch, sample) seeded stream so the
    run is bitwise reproducible for identical (data, config, seed).
    """
    task = Task(task)
    if not cohort.train or not cohort.val:
        raise ValueError("cohort must have non-empty train and val splits")
    torch.manual_seed(config.seed)

    train_records = list(cohort.train)
    val_inputs = [bindings(rec, train=False, rng=None)[0] for rec in cohort.val]
    val_targets = np.stack(
        [bindings(rec, train=False, rng=None)[1] for rec in cohort.val]
    ).astype(np.float32)
    train_targets = np.stack(
        [target_for_task(rec.label, task) for rec in train_records]
    ).astype(np.float32)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS
    )
    best_val = np.inf
    best_epoch = 0
    best_state = model.state_arrays()
    epochs_since_improvement = 0
    stats: list[EpochStats] = []

    model.net.train()
    for epoch in range(1, config.max_epochs + 1):
        order = np.random.default_rng(
            np.random.SeedSequence([config.seed, 0x50F7, epoch])
        ).permutation(len(train_records))
        running, seen = 0.0, 0
        for batch_no, start in enumerate(range(0, len(order), config.batch_size)):
            idx = order[start : start + config.batch_size]
            batch_inputs = []
            for i in idx:
                rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, int(i)]))
                batch_inputs.append(bindings(train_records[int(i)], train=True, rng=rng)[0])
            t = torch.from_numpy(train_targets[idx])
            optimizer.zero_grad()
            logits = model.batch_logits(batch_inputs)
            loss = bce_with_logits_torch(logits, t)
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {batch_no}"
                )
            loss.backward()
            optimizer.step()
            running += float(loss.detach()) * len(idx)
            seen += len(idx)
        train_loss = running / seen
        val_loss, val_acc = _evaluate_split(model, val_inputs, val_targets, config.batch_size)
        stats.append(EpochStats(epoch, train_loss, val_loss, val_acc))
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_state = model.state_arrays()
            epochs_since_improvement = 0
        else:
            epochs_since_improvement += 1
            if epochs_since_improvement >= config.patience:
                break
    model.net.eval()
    model.load_state_arrays(best_state)
    return model, TrainHistory(tuple(stats), best_epoch)


def overfit_config(seed: int = 0) -> TrainConfig:
    """Config for the 4-sample wiring check: loss must collapse quickly."""
    return TrainConfig(
        learning_rate=1e-3, batch_size=4, max_epochs=200, patience=199, seed=seed
    )


def config_with_seed(config: TrainConfig, seed: int) -> TrainConfig:
    return replace(config, seed=seed)
