"""Integer-string architecture encoding and its genetic operators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Tuple

import numpy as np

from .adapters import AdapterPlan, plan_adapter
from .knowledge_base import KnowledgeBase
from .model_zoo import HeadSpec

MAX_SPACE_SIZE = 2**63 - 1


class GenotypeError(ValueError):
    """Raised for genes outside the knowledge base's grid or malformed text."""


@dataclass(frozen=True, order=True)
class Genotype:
    """Gene ``j`` (1-based) picks the source architecture for position ``j``."""

    code: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "code", tuple(int(gene) for gene in self.code))
        if not self.code:
            raise GenotypeError("genotype needs at least one gene")

    def __str__(self) -> str:
        return "-".join(str(gene) for gene in self.code)

    def __len__(self) -> int:
        return len(self.code)

    def __iter__(self):
        return iter(self.code)

    @classmethod
    def parse(cls, text: str) -> "Genotype":
        try:
            return cls(tuple(int(part) for part in text.strip().split("-")))
        except ValueError as exc:
            raise GenotypeError(f"cannot parse genotype {text!r}") from exc

    @classmethod
    def constant(cls, arch_id: int, c: int) -> "Genotype":
        return cls((arch_id,) * c)

    def check(self, n: int, c: int) -> "Genotype":
        if len(self.code) != c:
            raise GenotypeError(f"genotype {self} has {len(self.code)} genes, expected {c}")
        bad = [gene for gene in self.code if not 1 <= gene <= n]
        if bad:
            raise GenotypeError(f"genotype {self} has genes {bad} outside [1, {n}]")
        return self


@dataclass(frozen=True)
class AssemblySpec:
    genotype: Genotype
    modules: Tuple[Tuple[int, int], ...]
    adapters: Tuple[AdapterPlan, ...]
    head: HeadSpec
    head_in_features: int

    def manifest_lines(self) -> Iterable[str]:
        yield f"genotype = {self.genotype}"
        for position, arch_id in self.modules:
            yield f"module.{position} = {arch_id}"
        for index, plan in enumerate(self.adapters, start=1):
            yield (
                f"adapter.{index} = {plan.kind},{plan.in_channels},{plan.out_channels},"
                f"{plan.k},{plan.eta},{plan.groups}"
            )
        yield f"head = {','.join(str(width) for width in self.head.widths)}"


def decode(
    g: Genotype, kb: KnowledgeBase, head_hidden: Tuple[int, ...], num_classes: int, *, use_baseline: bool = False
) -> AssemblySpec:
    g.check(kb.n, kb.c)
    modules = tuple((position, arch_id) for position, arch_id in enumerate(g.code, start=1))
    records = [kb.record(position, arch_id) for position, arch_id in modules]
    adapters = tuple(
        plan_adapter(before.out_channels, after.in_channels, use_baseline)
        for before, after in zip(records, records[1:])
    )
    last = records[-1]
    return AssemblySpec(
        genotype=g,
        modules=modules,
        adapters=adapters,
        head=HeadSpec.from_hidden(head_hidden, num_classes),
        head_in_features=last.out_channels * last.out_resolution * last.out_resolution,
    )


def space_size(n: int, c: int) -> int:
    if n < 1 or c < 1:
        raise ValueError("n and c must be >= 1")
    size = n**c
    if size > MAX_SPACE_SIZE:
        raise OverflowError(f"search space {n}^{c} exceeds a signed 64-bit count")
    return size


def sample(n: int, c: int, rng: np.random.Generator) -> Genotype:
    return Genotype(tuple(int(gene) for gene in rng.integers(1, n + 1, size=c)))


def crossover(a: Genotype, b: Genotype, rng: np.random.Generator) -> Tuple[Genotype, Genotype]:
    """Single-point crossover exchanging the suffixes after a cut in ``[1, c-1]``."""
    if len(a) != len(b):
        raise GenotypeError(f"cannot cross {a} with {b}: lengths differ")
    if len(a) < 2:
        return a, b
    cut = int(rng.integers(1, len(a)))
    return (
        Genotype(a.code[:cut] + b.code[cut:]),
        Genotype(b.code[:cut] + a.code[cut:]),
    )


def mutate(g: Genotype, n: int, p_mut: float, rng: np.random.Generator) -> Genotype:
    """Resample each gene with probability ``p_mut`` to a different uniform value."""
    if not 0.0 <= p_mut <= 1.0:
        raise ValueError("p_mut must lie in [0, 1]")
    if n < 2 or p_mut == 0.0:
        return g
    genes = list(g.code)
    for index, gene in enumerate(genes):
        if rng.random() < p_mut:
            # Draw from the n-1 other values.
            value = int(rng.integers(1, n))
            genes[index] = value if value < gene else value + 1
    return Genotype(tuple(genes))
