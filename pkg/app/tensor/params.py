"""Named parameter groups with gradient slots, frozen flag and optimizer state."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional

import numpy as np

RUNNING_MEAN = "bn-running-mean"
RUNNING_VAR = "bn-running-var"
BUFFER_SUFFIXES = (RUNNING_MEAN, RUNNING_VAR)


def is_buffer(name: str) -> bool:
    """Return True for statistics buffers the optimizer must never touch."""
    return name.endswith(BUFFER_SUFFIXES)


@dataclass
class ParamSet:
    """Parameters of one layer (one freeze group).

    Every trainable entry owns a gradient slot of the same shape; buffers
    (BN running statistics) have none.
    """

    values: Dict[str, np.ndarray] = field(default_factory=dict)
    frozen: bool = False
    grads: Dict[str, np.ndarray] = field(default_factory=dict)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, value in self.values.items():
            if not is_buffer(name) and name not in self.grads:
                self.grads[name] = np.zeros_like(value)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    def trainable_names(self) -> List[str]:
        return [name for name in self.values if not is_buffer(name)]

    def items(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(self.values.items())

    def set_grad(self, name: str, grad: np.ndarray) -> None:
        slot = self.grads.get(name)
        if slot is None:
            raise KeyError(f"No gradient slot for parameter {name!r}")
        if slot.shape != grad.shape:
            raise ValueError(
                f"Gradient shape {grad.shape} does not match parameter {name!r} {slot.shape}"
            )
        slot[...] = grad

    def zero_grad(self) -> None:
        for slot in self.grads.values():
            slot.fill(0)

    def freeze(self) -> None:
        self.frozen = True

    def unfreeze(self) -> None:
        self.frozen = False

    def num_trainable(self) -> int:
        return int(sum(self.values[name].size for name in self.trainable_names()))

    def num_values(self) -> int:
        return int(sum(value.size for value in self.values.values()))

    def copy(self, *, frozen: Optional[bool] = None) -> "ParamSet":
        """Deep copy of values; gradients and optimizer state start empty."""
        return ParamSet(
            values={name: np.array(value, copy=True) for name, value in self.values.items()},
            frozen=self.frozen if frozen is None else frozen,
        )

    @classmethod
    def from_mapping(cls, values: Mapping[str, np.ndarray], *, frozen: bool = False) -> "ParamSet":
        return cls(values={name: np.array(v, copy=True) for name, v in values.items()}, frozen=frozen)
