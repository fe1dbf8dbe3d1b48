"""Knowledge base of frozen modules cut from trained seed networks.

A module is one cell of a seed (its layers plus trained weights) kept at its
original position. The base is the ``c x n`` grid of modules, indexed by
``(position, arch_id)``, both 1-based.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import structlog

from .config import parse_key_values
from .model_zoo import REDUCTION_FACTOR, ArchSpec, resolution_schedule
from .tensor import Layer, LayerSpec, Network, ParamSet, Sequential, init_params, load_tensors, save_tensors

log = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.txt"
MANIFEST_VERSION = 1


class KnowledgeBaseError(ValueError):
    """Raised for malformed, incompatible or incomplete knowledge bases."""


def _expected_shapes(spec: LayerSpec) -> Dict[str, Tuple[int, ...]]:
    return {name: value.shape for name, value in init_params(spec, np.random.default_rng(0)).items()}


@dataclass(frozen=True)
class ModuleRecord:
    arch_id: int
    position: int
    arch_name: str
    layers: Tuple[LayerSpec, ...]
    weights: Tuple[ParamSet, ...]
    in_channels: int
    out_channels: int
    in_resolution: int
    out_resolution: int
    reduction_factor: int = REDUCTION_FACTOR

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.layers):
            raise KnowledgeBaseError(f"{self.label}: {len(self.weights)} weight groups for {len(self.layers)} layers")
        for index, (spec, params) in enumerate(zip(self.layers, self.weights)):
            shapes = {name: value.shape for name, value in params.items()}
            if shapes != _expected_shapes(spec):
                raise KnowledgeBaseError(f"{self.label}: layer {index} weights do not match its {spec.kind} schema")
            params.freeze()
            for value in params.values.values():
                value.flags.writeable = False

    @property
    def label(self) -> str:
        return f"module(position {self.position}, arch {self.arch_id})"

    @property
    def weight_file(self) -> str:
        return f"module_p{self.position}_a{self.arch_id}.mntw"

    def weight_state(self) -> Dict[str, np.ndarray]:
        return {
            f"{index}.{name}": value
            for index, params in enumerate(self.weights)
            for name, value in params.items()
        }

    def build_block(self) -> Sequential:
        """Fresh frozen cell holding writable copies of the stored weights."""
        return Sequential([Layer(spec, params.copy(frozen=True)) for spec, params in zip(self.layers, self.weights)])

    def num_params(self) -> int:
        return sum(params.num_trainable() for params in self.weights)


@dataclass(frozen=True)
class ValidationResult:
    diagnostics: Tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.diagnostics


@dataclass(frozen=True)
class KnowledgeBase:
    n: int
    c: int
    grid: Mapping[Tuple[int, int], ModuleRecord]
    schedule: Mapping[int, Tuple[int, int]]
    arch_names: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "grid", MappingProxyType(dict(self.grid)))
        object.__setattr__(self, "schedule", MappingProxyType(dict(self.schedule)))

    def record(self, position: int, arch_id: int) -> ModuleRecord:
        try:
            return self.grid[(position, arch_id)]
        except KeyError:
            raise KnowledgeBaseError(f"no module at position {position} for arch {arch_id}") from None

    def records(self) -> List[ModuleRecord]:
        return [self.grid[key] for key in sorted(self.grid)]

    def fingerprint(self) -> str:
        digest = hashlib.sha256(_manifest_text(self).encode("utf-8"))
        for record in self.records():
            for name, value in sorted(record.weight_state().items()):
                digest.update(name.encode("utf-8"))
                digest.update(np.ascontiguousarray(value, dtype="<f4").tobytes())
        return digest.hexdigest()


def decompose(
    network: Network, spec: ArchSpec, *, arch_id: int, c: int, input_size: int
) -> List[ModuleRecord]:
    """Cut a trained seed into ``c`` frozen modules, in position order."""
    if spec.c != c:
        raise KnowledgeBaseError(f"{spec.name} has {spec.c} cells, expected {c}")
    records = []
    for position, ((in_res, out_res), cell) in enumerate(zip(resolution_schedule(input_size, c), spec.cells), start=1):
        block = network.block(f"cell{position}")
        layers = list(block.layers())
        if [layer.spec for layer in layers] != list(cell.layers):
            raise KnowledgeBaseError(f"{spec.name} cell {position} does not match its specification")
        records.append(
            ModuleRecord(
                arch_id=arch_id,
                position=position,
                arch_name=spec.name,
                layers=tuple(cell.layers),
                weights=tuple(layer.params.copy(frozen=True) for layer in layers),
                in_channels=cell.in_channels,
                out_channels=cell.out_channels,
                in_resolution=in_res,
                out_resolution=out_res,
                reduction_factor=cell.reduction_factor,
            )
        )
    return records


def validate(kb: KnowledgeBase) -> ValidationResult:
    """Check grid totality and that every module matches its position's schedule."""
    diagnostics: List[str] = []
    for position in range(1, kb.c + 1):
        expected = kb.schedule.get(position)
        if expected is None:
            diagnostics.append(f"position {position}: no schedule entry")
        for arch_id in range(1, kb.n + 1):
            record = kb.grid.get((position, arch_id))
            if record is None:
                diagnostics.append(f"(position {position}, arch {arch_id}): module missing")
                continue
            issues = []
            if record.position != position or record.arch_id != arch_id:
                issues.append(f"stored as (position {record.position}, arch {record.arch_id})")
            if expected is not None and record.in_resolution != expected[0]:
                issues.append(f"in_resolution {record.in_resolution} != schedule {expected[0]}")
            if expected is not None and record.reduction_factor != expected[1]:
                issues.append(f"reduction_factor {record.reduction_factor} != schedule {expected[1]}")
            if record.out_resolution != record.in_resolution // max(record.reduction_factor, 1):
                issues.append(
                    f"out_resolution {record.out_resolution} != {record.in_resolution}/{record.reduction_factor}"
                )
            if issues:
                diagnostics.append(f"(position {position}, arch {arch_id}): " + "; ".join(issues))
    extra = sorted(key for key in kb.grid if not (1 <= key[0] <= kb.c and 1 <= key[1] <= kb.n))
    diagnostics.extend(f"(position {p}, arch {a}): outside the {kb.c}x{kb.n} grid" for p, a in extra)
    return ValidationResult(tuple(diagnostics))


def build_knowledge_base(
    seeds: Sequence[Tuple[ArchSpec, Network]], *, c: int, input_size: int
) -> KnowledgeBase:
    grid: Dict[Tuple[int, int], ModuleRecord] = {}
    for arch_id, (spec, network) in enumerate(seeds, start=1):
        for record in decompose(network, spec, arch_id=arch_id, c=c, input_size=input_size):
            grid[(record.position, arch_id)] = record
    schedule = {
        position: (in_res, REDUCTION_FACTOR)
        for position, (in_res, _) in enumerate(resolution_schedule(input_size, c), start=1)
    }
    kb = KnowledgeBase(
        n=len(seeds), c=c, grid=grid, schedule=schedule, arch_names=tuple(spec.name for spec, _ in seeds)
    )
    result = validate(kb)
    if not result.ok:
        raise KnowledgeBaseError("knowledge base failed validation: " + " | ".join(result.diagnostics))
    log.info("knowledge_base_built", n=kb.n, c=kb.c, modules=len(grid))
    return kb


# ----------------------------------------------------------------------------
# Persistence


def _manifest_text(kb: KnowledgeBase) -> str:
    lines = [f"version = {MANIFEST_VERSION}", f"n = {kb.n}", f"c = {kb.c}"]
    lines += [f"arch.{index} = {name}" for index, name in enumerate(kb.arch_names, start=1)]
    for position in sorted(kb.schedule):
        in_res, factor = kb.schedule[position]
        lines.append(f"schedule.{position} = {in_res},{factor}")
    for record in kb.records():
        key = f"record.{record.position}.{record.arch_id}"
        lines += [
            f"{key}.arch_name = {record.arch_name}",
            f"{key}.file = {record.weight_file}",
            f"{key}.channels = {record.in_channels},{record.out_channels}",
            f"{key}.resolution = {record.in_resolution},{record.out_resolution}",
            f"{key}.reduction = {record.reduction_factor}",
            f"{key}.layers = {json.dumps([layer.to_dict() for layer in record.layers], sort_keys=True)}",
        ]
    return "\n".join(lines) + "\n"


def save_knowledge_base(kb: KnowledgeBase, path: Path) -> Path:
    result = validate(kb)
    if not result.ok:
        raise KnowledgeBaseError("refusing to save an invalid knowledge base: " + " | ".join(result.diagnostics))
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for record in kb.records():
        save_tensors(root / record.weight_file, record.weight_state())
    (root / MANIFEST_NAME).write_text(_manifest_text(kb), encoding="utf-8")
    return root


def _pair(values: Mapping[str, str], key: str) -> Tuple[int, int]:
    try:
        first, second = (int(part) for part in values[key].split(","))
    except (KeyError, ValueError) as exc:
        raise KnowledgeBaseError(f"manifest entry {key!r} missing or malformed") from exc
    return first, second


def _int(values: Mapping[str, str], key: str) -> int:
    try:
        return int(values[key])
    except (KeyError, ValueError) as exc:
        raise KnowledgeBaseError(f"manifest entry {key!r} missing or malformed") from exc


def _load_record(root: Path, values: Mapping[str, str], position: int, arch_id: int) -> Optional[ModuleRecord]:
    key = f"record.{position}.{arch_id}"
    if f"{key}.file" not in values:
        return None
    try:
        layers = tuple(LayerSpec.from_dict(item) for item in json.loads(values[f"{key}.layers"]))
    except (KeyError, ValueError, TypeError) as exc:
        raise KnowledgeBaseError(f"{key}: unreadable layer list") from exc
    tensors = load_tensors(root / values[f"{key}.file"])
    weights = []
    for index, spec in enumerate(layers):
        prefix = f"{index}."
        group = {name[len(prefix):]: value for name, value in tensors.items() if name.startswith(prefix)}
        weights.append(ParamSet.from_mapping(group, frozen=True))
    claimed = sum(len(group) for group in weights)
    if claimed != len(tensors):
        raise KnowledgeBaseError(f"{values[f'{key}.file']}: {len(tensors) - claimed} tensors belong to no layer")
    in_channels, out_channels = _pair(values, f"{key}.channels")
    in_res, out_res = _pair(values, f"{key}.resolution")
    return ModuleRecord(
        arch_id=arch_id,
        position=position,
        arch_name=values.get(f"{key}.arch_name", ""),
        layers=layers,
        weights=tuple(weights),
        in_channels=in_channels,
        out_channels=out_channels,
        in_resolution=in_res,
        out_resolution=out_res,
        reduction_factor=_int(values, f"{key}.reduction"),
    )


def load_knowledge_base(path: Path) -> KnowledgeBase:
    root = Path(path)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    values = parse_key_values(manifest.read_text(encoding="utf-8"), source=str(manifest))
    version = _int(values, "version")
    if version != MANIFEST_VERSION:
        raise KnowledgeBaseError(f"{manifest}: unsupported manifest version {version}")
    n, c = _int(values, "n"), _int(values, "c")
    grid = {}
    for position in range(1, c + 1):
        for arch_id in range(1, n + 1):
            record = _load_record(root, values, position, arch_id)
            if record is not None:
                grid[(position, arch_id)] = record
    schedule = {
        position: _pair(values, f"schedule.{position}")
        for position in range(1, c + 1)
        if f"schedule.{position}" in values
    }
    names = tuple(values.get(f"arch.{index}", "") for index in range(1, n + 1))
    kb = KnowledgeBase(n=n, c=c, grid=grid, schedule=schedule, arch_names=names)
    result = validate(kb)
    if not result.ok:
        raise KnowledgeBaseError(f"{root}: " + " | ".join(result.diagnostics))
    return kb
