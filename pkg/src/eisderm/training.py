"""Minibatch Adam training loop shared by every model family."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from .autodiff import Adam, NumericError, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int
    lr: float
    eis_lr: float | None = None  # joint models only: GRU encoder step size (None: ``lr``)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError(f"invalid training config {self}")
        if self.eis_lr is not None and not self.eis_lr > 0:
            raise ValueError(f"invalid training config {self}")


# Hyperparameters reported for the clinical data.
PAPER_EIS = TrainConfig(epochs=200, batch_size=10, lr=2e-5)
PAPER_CNN = TrainConfig(epochs=100, batch_size=20, lr=2.5e-5)
PAPER_JOINT = TrainConfig(epochs=100, batch_size=20, lr=2.5e-5)

# CPU-sized defaults for the synthetic benchmark.
DESK_EIS = TrainConfig(epochs=20, batch_size=10, lr=2e-5)
DESK_CNN = TrainConfig(epochs=15, batch_size=20, lr=1e-3)
DESK_JOINT = TrainConfig(epochs=15, batch_size=20, lr=1e-3, eis_lr=2e-5)


class Trainable(Protocol):
    def trainable_parameters(self) -> list[Tensor]: ...
    def loss(self, batch: Sequence, rng: np.random.Generator) -> Tensor: ...
    def train(self, mode: bool = True): ...


def make_batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    """Split ``order`` into batches; a trailing singleton joins the previous batch.

    Batch normalisation needs at least two samples per batch.
    """
    batches = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def fit(model: Trainable, items: Sequence, config: TrainConfig,
        rng: np.random.Generator,
        groups: Sequence[tuple[Sequence[Tensor], float]] | None = None) -> list[float]:
    """Train ``model`` in place; returns the mean loss of each epoch.

    ``groups`` optionally splits the parameters into ``(params, lr)`` pairs,
    each with its own Adam moments; by default every trainable parameter
    steps with ``config.lr``.
    """
    if len(items) < 2:
        raise ValueError("need at least two training items")
    if groups is None:
        groups = [(model.trainable_parameters(), config.lr)]
    opts = [Adam(params, lr=lr) for params, lr in groups if len(params)]
    history = []
    model.train()
    for epoch in range(config.epochs):
        total, count = 0.0, 0
        for idx in make_batches(rng.permutation(len(items)), config.batch_size):
            for opt in opts:
                opt.zero_grad()
            loss = model.loss([items[i] for i in idx], rng)
            value = loss.item()
            if not math.isfinite(value):
                raise NumericError(f"loss diverged at epoch {epoch}")
            loss.backward()
            for opt in opts:
                opt.step()
            total += value * len(idx)
            count += len(idx)
        history.append(total / count)
        log.debug("epoch %d loss %.4f", epoch, history[-1])
    model.eval()
    return history
