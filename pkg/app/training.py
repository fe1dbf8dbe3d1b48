"""Minibatch training and evaluation loops shared by every stage."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, List, Optional

import numpy as np
import structlog

from .tensor import SGD, Network, cross_entropy

log = structlog.get_logger(__name__)

Augment = Callable[[np.ndarray, np.random.Generator], np.ndarray]


class TrainingDivergedError(RuntimeError):
    """Raised when a minibatch produces a non-finite loss."""

    def __init__(self, epoch: int, batch: int, loss: float) -> None:
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, batch {batch}")


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def build(self) -> SGD:
        return SGD(self.learning_rate, self.momentum, self.weight_decay)


def minibatches(count: int, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    order = rng.permutation(count)
    for start in range(0, count, batch_size):
        yield order[start : start + batch_size]


def train_epoch(
    network: Network,
    images: np.ndarray,
    labels: np.ndarray,
    optimizer: SGD,
    batch_size: int,
    rng: np.random.Generator,
    *,
    augment: Optional[Augment] = None,
    epoch: int = 0,
) -> float:
    """One shuffled pass; returns the sample-weighted mean training loss."""
    total = 0.0
    seen = 0
    for batch_index, idx in enumerate(minibatches(len(images), batch_size, rng)):
        batch = images[idx]
        if augment is not None:
            batch = augment(batch, rng)
        logits = network.forward(batch, training=True)
        loss, dlogits = cross_entropy(logits, labels[idx])
        if not math.isfinite(loss):
            raise TrainingDivergedError(epoch, batch_index, loss)
        network.backward(dlogits)
        optimizer.step(network.trainable_groups())
        total += loss * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


def fit(
    network: Network,
    images: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    optim: OptimConfig,
    rng: np.random.Generator,
    augment: Optional[Augment] = None,
) -> List[float]:
    """Train for ``epochs`` passes and return the per-epoch loss history."""
    optimizer = optim.build()
    history: List[float] = []
    for epoch in range(1, epochs + 1):
        history.append(
            train_epoch(network, images, labels, optimizer, optim.batch_size, rng, augment=augment, epoch=epoch)
        )
    return history


def predict_logits(network: Network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    outputs = [
        network.forward(images[start : start + batch_size], training=False, record=False)
        for start in range(0, len(images), batch_size)
    ]
    return np.concatenate(outputs, axis=0)


def accuracy(network: Network, images: np.ndarray, labels: np.ndarray, batch_size: int = 256) -> float:
    if len(images) == 0:
        raise ValueError("accuracy needs at least one sample")
    predictions = predict_logits(network, images, batch_size).argmax(axis=1)
    return float((predictions == labels).mean())
