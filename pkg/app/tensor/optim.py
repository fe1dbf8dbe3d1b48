"""Momentum SGD over parameter groups."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

import numpy as np

from .params import ParamSet


@dataclass
class SGD:
    """Heavy-ball SGD: ``v = momentum * v + g (+ wd * p); p -= lr * v``.

    Frozen groups and statistics buffers are never touched.
    """

    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")

    def step(self, groups: Iterable[ParamSet]) -> None:
        for group in groups:
            sgd_step(group, self.learning_rate, self.momentum, self.weight_decay)


def sgd_step(params: ParamSet, lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> ParamSet:
    """Update ``params`` in place from its gradient slots and return it."""
    if params.frozen:
        return params
    for name in params.trainable_names():
        value = params.values[name]
        grad = params.grads[name]
        if weight_decay:
            grad = grad + value.dtype.type(weight_decay) * value
        velocity = params.velocity.get(name)
        if velocity is None or not momentum:
            velocity = np.array(grad, dtype=value.dtype, copy=True)
        else:
            velocity = value.dtype.type(momentum) * velocity + grad
        params.velocity[name] = velocity
        value -= value.dtype.type(lr) * velocity
    return params
