"""Seed architectures: plain and residual stacks cut into ``c`` cells, plus the head."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from .datasets import Dataset
from .tensor import Layer, LayerSpec, Network, Sequential
from .tensor.layers import batchnorm_spec, conv, linear_spec, output_shape, pool, relu_spec, residual
from .training import Augment, OptimConfig, accuracy, train_epoch

log = structlog.get_logger(__name__)

REDUCTION_FACTOR = 2
INPUT_CHANNELS = 3


class ArchSpecError(ValueError):
    """Raised for inconsistent architecture specifications."""


@dataclass(frozen=True)
class CellSpec:
    layers: Tuple[LayerSpec, ...]
    in_channels: int
    out_channels: int
    reduction_factor: int = REDUCTION_FACTOR

    def to_dict(self) -> Dict[str, Any]:
        return {
            "layers": [layer.to_dict() for layer in self.layers],
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "reduction_factor": self.reduction_factor,
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "CellSpec":
        return cls(
            layers=tuple(LayerSpec.from_dict(item) for item in payload["layers"]),
            in_channels=int(payload["in_channels"]),
            out_channels=int(payload["out_channels"]),
            reduction_factor=int(payload.get("reduction_factor", REDUCTION_FACTOR)),
        )


@dataclass(frozen=True)
class HeadSpec:
    """Fully connected classifier; ``widths`` ends with ``num_classes``."""

    widths: Tuple[int, ...]
    num_classes: int

    def __post_init__(self) -> None:
        if not self.widths or self.widths[-1] != self.num_classes:
            raise ArchSpecError(f"head widths {self.widths} must end with num_classes={self.num_classes}")
        if any(width < 1 for width in self.widths):
            raise ArchSpecError(f"head widths must be positive: {self.widths}")

    @classmethod
    def from_hidden(cls, hidden: Sequence[int], num_classes: int) -> "HeadSpec":
        return cls(widths=tuple(int(w) for w in hidden) + (int(num_classes),), num_classes=int(num_classes))


@dataclass(frozen=True)
class ArchSpec:
    name: str
    family: str
    cells: Tuple[CellSpec, ...]
    head: HeadSpec

    @property
    def c(self) -> int:
        return len(self.cells)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "family": self.family,
            "cells": [cell.to_dict() for cell in self.cells],
            "head": {"widths": list(self.head.widths), "num_classes": self.head.num_classes},
        }

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> "ArchSpec":
        head = payload["head"]
        return cls(
            name=str(payload["name"]),
            family=str(payload["family"]),
            cells=tuple(CellSpec.from_dict(cell) for cell in payload["cells"]),
            head=HeadSpec(tuple(int(w) for w in head["widths"]), int(head["num_classes"])),
        )


@dataclass(frozen=True)
class SeedTemplate:
    family: str
    widths: Tuple[int, ...]
    depth: int


# Widths are chosen so that every adapter kind occurs between families.
SEED_CATALOG: Dict[str, SeedTemplate] = {
    "plain-a": SeedTemplate("plain", (16, 32, 64, 64, 128), 1),
    "plain-b": SeedTemplate("plain", (24, 48, 96, 96, 192), 2),
    "residual-a": SeedTemplate("residual", (16, 32, 64, 64, 128), 1),
    "residual-b": SeedTemplate("residual", (12, 40, 80, 80, 160), 1),
}
DEFAULT_SEEDS = tuple(SEED_CATALOG)


def plain_cell(in_channels: int, out_channels: int, depth: int = 1) -> CellSpec:
    layers: List[LayerSpec] = []
    channels = in_channels
    for _ in range(depth):
        layers += [conv(channels, out_channels), batchnorm_spec(out_channels), relu_spec()]
        channels = out_channels
    layers.append(pool("maxpool2d", 2, 2))
    return CellSpec(tuple(layers), in_channels, out_channels)


def residual_cell(in_channels: int, out_channels: int, blocks: int = 1) -> CellSpec:
    layers: List[LayerSpec] = [residual(in_channels, out_channels)]
    layers += [residual(out_channels, out_channels) for _ in range(blocks - 1)]
    layers += [conv(out_channels, out_channels, 3, 2, 1), batchnorm_spec(out_channels), relu_spec()]
    return CellSpec(tuple(layers), in_channels, out_channels)


def make_arch(
    name: str,
    family: str,
    widths: Sequence[int],
    c: int,
    head: HeadSpec,
    depth: int = 1,
) -> ArchSpec:
    if len(widths) < c:
        raise ArchSpecError(f"{name}: {len(widths)} widths cannot fill {c} cells")
    if family not in {"plain", "residual"}:
        raise ArchSpecError(f"{name}: unknown family {family!r}")
    builder = plain_cell if family == "plain" else residual_cell
    cells = []
    channels = INPUT_CHANNELS
    for width in widths[:c]:
        cells.append(builder(channels, width, depth))
        channels = width
    spec = ArchSpec(name=name, family=family, cells=tuple(cells), head=head)
    validate_arch(spec)
    return spec


def seed_catalog(names: Sequence[str], c: int, head: HeadSpec) -> List[ArchSpec]:
    specs = []
    for name in names:
        template = SEED_CATALOG.get(name)
        if template is None:
            raise ArchSpecError(f"Unknown seed architecture {name!r} (known: {', '.join(SEED_CATALOG)})")
        specs.append(make_arch(name, template.family, template.widths, c, head, template.depth))
    return specs


def _validate_cell(name: str, index: int, cell: CellSpec) -> None:
    where = f"{name} cell {index}"
    channels = cell.in_channels
    reductions = [pos for pos, layer in enumerate(cell.layers) if layer.is_reduction]
    if len(reductions) != 1:
        raise ArchSpecError(f"{where}: expected exactly one reduction layer, found {len(reductions)}")
    trailing = cell.layers[reductions[0] + 1 :]
    if any(layer.kind not in {"batchnorm", "relu"} for layer in trailing):
        raise ArchSpecError(f"{where}: only batchnorm/relu may follow the reduction layer")
    for layer in cell.layers:
        hp = layer.hyperparams
        if layer.kind == "linear":
            raise ArchSpecError(f"{where}: linear layers belong to the head")
        if layer.kind in {"conv2d", "residual-block"}:
            if hp["in_channels"] != channels:
                raise ArchSpecError(f"{where}: {layer.kind} expects {hp['in_channels']} channels, gets {channels}")
            channels = hp["out_channels"]
        elif layer.kind == "batchnorm" and hp["channels"] != channels:
            raise ArchSpecError(f"{where}: batchnorm over {hp['channels']} channels, gets {channels}")
    if channels != cell.out_channels:
        raise ArchSpecError(f"{where}: layers produce {channels} channels, cell declares {cell.out_channels}")
    if cell.reduction_factor != REDUCTION_FACTOR:
        raise ArchSpecError(f"{where}: reduction factor must be {REDUCTION_FACTOR}")


def validate_arch(spec: ArchSpec) -> None:
    if not spec.cells:
        raise ArchSpecError(f"{spec.name}: no cells")
    expected = INPUT_CHANNELS
    for index, cell in enumerate(spec.cells, start=1):
        if cell.in_channels != expected:
            raise ArchSpecError(
                f"{spec.name}: cell {index} takes {cell.in_channels} channels but receives {expected}"
            )
        _validate_cell(spec.name, index, cell)
        expected = cell.out_channels


def resolution_schedule(input_size: int, c: int) -> List[Tuple[int, int]]:
    """(in_resolution, out_resolution) per position for an ``input_size`` input."""
    schedule = []
    size = input_size
    for _ in range(c):
        schedule.append((size, size // REDUCTION_FACTOR))
        size //= REDUCTION_FACTOR
    return schedule


def cell_output_shape(cell: CellSpec, shape: Tuple[int, int, int]) -> Tuple[int, ...]:
    for layer in cell.layers:
        shape = output_shape(layer, shape)  # type: ignore[assignment]
    return shape


def head_input_features(spec: ArchSpec, input_size: int) -> int:
    shape: Tuple[int, ...] = (INPUT_CHANNELS, input_size, input_size)
    for cell in spec.cells:
        shape = cell_output_shape(cell, shape)  # type: ignore[arg-type]
    if min(shape[1:]) < 1:
        raise ArchSpecError(f"{spec.name}: input {input_size} too small for {spec.c} reductions")
    return int(np.prod(shape))


def build_cell(cell: CellSpec, rng: np.random.Generator) -> Sequential:
    return Sequential([Layer(layer, rng=rng) for layer in cell.layers])


def build_head(in_features: int, head: HeadSpec, rng: np.random.Generator) -> Sequential:
    layers: List[Layer] = []
    features = in_features
    for index, width in enumerate(head.widths):
        layers.append(Layer(linear_spec(features, width), rng=rng))
        if index < len(head.widths) - 1:
            layers.append(Layer(relu_spec()))
        features = width
    return Sequential(layers)


def build_seed(spec: ArchSpec, rng_seed: int, input_size: int = 32) -> Network:
    """Freshly initialised network for ``spec``; deterministic per ``rng_seed``."""
    validate_arch(spec)
    rng = np.random.default_rng(rng_seed)
    blocks: List[Tuple[str, Any]] = [
        (f"cell{index}", build_cell(cell, rng)) for index, cell in enumerate(spec.cells, start=1)
    ]
    blocks.append(("head", build_head(head_input_features(spec, input_size), spec.head, rng)))
    return Network(blocks)


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class SeedTrainingResult:
    network: Network
    history: List[EpochMetrics] = field(default_factory=list)

    @property
    def val_accuracy(self) -> Optional[float]:
        return self.history[-1].val_accuracy if self.history else None


def train_seed(
    network: Network,
    dataset: Dataset,
    epochs: int,
    optim: OptimConfig,
    *,
    seed: int = 0,
    augment: Optional[Augment] = None,
    eval_batch_size: int = 256,
    name: str = "seed",
) -> SeedTrainingResult:
    """Train ``network`` in place, recording (train loss, val accuracy) per epoch."""
    train_x, train_y = dataset.subset("train")
    val_x, val_y = dataset.subset("val")
    rng = np.random.default_rng(seed)
    optimizer = optim.build()
    result = SeedTrainingResult(network=network)
    for epoch in range(1, epochs + 1):
        loss = train_epoch(network, train_x, train_y, optimizer, optim.batch_size, rng, augment=augment, epoch=epoch)
        val_acc = accuracy(network, val_x, val_y, eval_batch_size)
        result.history.append(EpochMetrics(epoch, loss, val_acc))
        log.info("seed_epoch", seed=name, epoch=epoch, train_loss=round(loss, 5), val_accuracy=val_acc)
    return result
