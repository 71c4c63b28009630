"""Training loop, learning-rate/early-stop callbacks and evaluation."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data.batching import BatchGenerator
from .metrics import LOSSES, MetricAccumulator, MetricsReport
from .model import AttentionUNet, forward, save_weights
from .optim import AdamState, adam_step, model_grads
from .tensor import no_grad

log = logging.getLogger(__name__)

IMPROVEMENT_DELTA = 1e-4
HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "train_dice", "val_dice", "lr", "seconds")


class DivergedTrainingError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 16
    max_epochs: int = 50
    loss: str = "combined"
    early_stopping: bool = True
    early_stop_patience: int = 10
    reduce_on_plateau: bool = True
    plateau_factor: float = 0.2
    plateau_patience: int = 5
    min_lr: float = 1e-7
    seed: int = 0
    record_wall_time: bool = True

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {sorted(LOSSES)}, got {self.loss!r}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.early_stop_patience < 1 or self.plateau_patience < 1:
            raise ValueError("patience values must be >= 1")
        if not self.lr > self.min_lr > 0:
            raise ValueError("need lr > min_lr > 0")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_loss: float
    train_dice: float
    val_dice: float
    lr: float
    seconds: float


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> list[float]:
        return [getattr(r, name) for r in self.rows]


@dataclass
class CallbackState:
    """Shared state of the plateau and early-stop rules.

    Each rule keeps its own best value and wait counter, like two independent
    callbacks watching the same validation loss.
    """

    best_val_loss: float = math.inf
    best_epoch: int = 0
    wait_stop: int = 0
    plateau_best: float = math.inf
    wait_plateau: int = 0
    best_weights: dict[str, np.ndarray] | None = None


def _improved(value: float, best: float) -> bool:
    return value < best - IMPROVEMENT_DELTA


def plateau_update(state: CallbackState, val_loss: float, lr: float, factor: float = 0.2,
                   patience: int = 5, min_lr: float = 1e-7) -> float:
    """Return the learning rate for the next epoch."""
    if _improved(val_loss, state.plateau_best):
        state.plateau_best = val_loss
        state.wait_plateau = 0
        return lr
    state.wait_plateau += 1
    if state.wait_plateau >= patience:
        state.wait_plateau = 0
        if lr > min_lr:
            return max(lr * factor, min_lr)
    return lr


def early_stop_update(state: CallbackState, val_loss: float, patience: int = 10,
                      weights: dict[str, np.ndarray] | None = None, epoch: int = 0) -> str:
    """``"continue"`` or ``"stop"``; snapshots ``weights`` on improvement."""
    if _improved(val_loss, state.best_val_loss):
        state.best_val_loss = val_loss
        state.best_epoch = epoch
        state.wait_stop = 0
        if weights is not None:
            state.best_weights = {k: v.copy() for k, v in weights.items()}
        return "continue"
    state.wait_stop += 1
    return "stop" if state.wait_stop >= patience else "continue"


def evaluate_accumulator(model: AttentionUNet, generator: BatchGenerator, batch_size: int | None = None) -> MetricAccumulator:
    """Run the model over every sample in storage order."""
    bs = batch_size or generator.batch_size
    acc = MetricAccumulator(num_classes=model.config.num_classes)
    with no_grad():
        for i in range(0, len(generator), bs):
            probs = forward(model, generator.images[i:i + bs])
            acc.update(generator.masks[i:i + bs], probs.data)
    return acc


def evaluate(model: AttentionUNet, generator: BatchGenerator, batch_size: int | None = None) -> MetricsReport:
    return evaluate_accumulator(model, generator, batch_size).report()


def train(model: AttentionUNet, train_gen: BatchGenerator, val_gen: BatchGenerator, config: TrainConfig,
          checkpoint_path=None, on_epoch: Callable[[HistoryRow], None] | None = None):
    """Optimise ``model`` in place; returns ``(model, History)``.

    If early stopping fires, the weights of the best validation epoch are
    restored before returning.
    """
    loss_fn = LOSSES[config.loss]
    adam = AdamState()
    cb = CallbackState()
    history = History()
    lr = config.lr
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        train_acc = MetricAccumulator(num_classes=model.config.num_classes)
        loss_total = 0.0
        seen = 0
        for b, (images, masks) in enumerate(train_gen.epoch(), start=1):
            model.zero_grad()
            probs = forward(model, images)
            loss = loss_fn(masks, probs)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedTrainingError(epoch, b, value)
            loss.backward()
            adam_step(model.params, model_grads(model.params), adam, lr)
            loss_total += value * len(images)
            seen += len(images)
            train_acc.update(masks, probs.data)
        val_acc = evaluate_accumulator(model, val_gen)
        val_loss = val_acc.loss(config.loss)
        if not math.isfinite(val_loss):
            raise DivergedTrainingError(epoch, 0, val_loss)
        row = HistoryRow(
            epoch=epoch,
            train_loss=loss_total / seen,
            val_loss=val_loss,
            train_dice=float(train_acc.dice()),
            val_dice=float(val_acc.dice()),
            lr=lr,
            seconds=(time.perf_counter() - t0) if config.record_wall_time else 0.0,
        )
        history.rows.append(row)
        if on_epoch is not None:
            on_epoch(row)

        if config.reduce_on_plateau:
            new_lr = plateau_update(cb, val_loss, lr, config.plateau_factor, config.plateau_patience, config.min_lr)
            if new_lr != lr:
                log.info("epoch %d: reducing learning rate to %.3g", epoch, new_lr)
            lr = new_lr
        before = cb.best_epoch
        decision = early_stop_update(cb, val_loss, config.early_stop_patience, model.state(), epoch)
        if cb.best_epoch != before and checkpoint_path is not None:
            save_weights(model, checkpoint_path)
        if config.early_stopping and decision == "stop":
            log.info("early stop after epoch %d; restoring epoch %d", epoch, cb.best_epoch)
            model.load_state(cb.best_weights)
            break
    return model, history


def write_history_csv(history: History, path) -> None:
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(HISTORY_COLUMNS)
            for r in history.rows:
                writer.writerow([r.epoch] + [f"{getattr(r, c):.6g}" for c in HISTORY_COLUMNS[1:]])
    except OSError as exc:
        raise OSError(f"cannot write history to {path}: {exc}") from exc


def read_history_csv(path) -> History:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != HISTORY_COLUMNS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        rows = [HistoryRow(int(r["epoch"]), *(float(r[c]) for c in HISTORY_COLUMNS[1:])) for r in reader]
    return History(rows)
