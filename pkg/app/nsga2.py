"""NSGA-II search loop over genotypes.

Objectives are minimized. The loop is sequential; each generation's offspring
are handed to the evaluator as one batch and gathered before selection.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import structlog

from .genotype import Genotype, crossover, mutate, sample

log = structlog.get_logger(__name__)

# Stand-in for non-finite objectives so dominance stays a strict partial order.
WORST_OBJECTIVE = 1e30


@dataclass(frozen=True)
class Evaluation:
    objectives: Tuple[float, ...]
    payload: Any = None
    cached: bool = False


class BatchEvaluator(Protocol):
    def evaluate_batch(self, genotypes: Sequence[Genotype], generation: int) -> List[Evaluation]: ...


@dataclass
class Individual:
    genotype: Genotype
    objectives: Tuple[float, ...]
    payload: Any = None
    rank: int = -1
    crowding: float = 0.0
    born: int = 1

    def __post_init__(self) -> None:
        if not self.objectives:
            raise ValueError(f"individual {self.genotype} has no objectives")
        self.objectives = tuple(
            float(value) if math.isfinite(value) else WORST_OBJECTIVE for value in self.objectives
        )

    @property
    def score(self) -> float:
        return self.objectives[0]

    @property
    def text(self) -> str:
        return str(self.genotype)


def dominates(a: Sequence[float], b: Sequence[float]) -> bool:
    return all(x <= y for x, y in zip(a, b)) and any(x < y for x, y in zip(a, b))


def non_dominated_sort(individuals: Sequence[Individual]) -> List[List[Individual]]:
    """Partition into fronts and assign ``rank`` to every member."""
    count = len(individuals)
    dominated_by: List[List[int]] = [[] for _ in range(count)]
    domination_count = [0] * count
    fronts: List[List[int]] = [[]]
    for i in range(count):
        for j in range(i + 1, count):
            if dominates(individuals[i].objectives, individuals[j].objectives):
                dominated_by[i].append(j)
                domination_count[j] += 1
            elif dominates(individuals[j].objectives, individuals[i].objectives):
                dominated_by[j].append(i)
                domination_count[i] += 1
    for i in range(count):
        if domination_count[i] == 0:
            fronts[0].append(i)
    while fronts[-1]:
        following: List[int] = []
        for i in fronts[-1]:
            for j in dominated_by[i]:
                domination_count[j] -= 1
                if domination_count[j] == 0:
                    following.append(j)
        fronts.append(sorted(following))
    fronts.pop()
    result = []
    for rank, members in enumerate(fronts):
        for i in members:
            individuals[i].rank = rank
        result.append([individuals[i] for i in members])
    return result


def crowding_distance(front: Sequence[Individual]) -> List[float]:
    """Normalized objective-gap sum per member; boundary members get infinity."""
    if not front:
        raise ValueError("crowding distance needs a non-empty front")
    size = len(front)
    distance = [0.0] * size
    if size <= 2:
        distance = [math.inf] * size
    else:
        for m in range(len(front[0].objectives)):
            order = sorted(range(size), key=lambda i: (front[i].objectives[m], front[i].text))
            low, high = front[order[0]].objectives[m], front[order[-1]].objectives[m]
            distance[order[0]] = distance[order[-1]] = math.inf
            span = high - low
            if span == 0:
                continue
            for before, current, after in zip(order, order[1:], order[2:]):
                if math.isfinite(distance[current]):
                    distance[current] += (front[after].objectives[m] - front[before].objectives[m]) / span
    for member, value in zip(front, distance):
        member.crowding = value
    return distance


def assign_ranks(individuals: Sequence[Individual]) -> List[List[Individual]]:
    fronts = non_dominated_sort(individuals)
    for front in fronts:
        crowding_distance(front)
    return fronts


def _preference(ind: Individual) -> Tuple[int, float, str]:
    return (ind.rank, -ind.crowding, ind.text)


def binary_tournament(population: Sequence[Individual], rng: np.random.Generator) -> Individual:
    """Lower rank wins, then larger crowding, then smaller genotype text."""
    i, j = rng.integers(0, len(population), size=2)
    return min(population[int(i)], population[int(j)], key=_preference)


def select_survivors(combined: Sequence[Individual], p_size: int) -> List[Individual]:
    """Fill by ascending front, splitting the boundary front by descending crowding."""
    survivors: List[Individual] = []
    for front in assign_ranks(combined):
        ordered = sorted(front, key=_preference)
        room = p_size - len(survivors)
        survivors.extend(ordered[:room])
        if len(survivors) == p_size:
            break
    return survivors


@dataclass(frozen=True)
class SearchConfig:
    gen: int
    p_size: int
    p_mut: Optional[float] = None
    p_cross: float = 1.0

    def __post_init__(self) -> None:
        if self.gen < 1 or self.p_size < 1:
            raise ValueError("gen and p_size must be >= 1")
        if self.p_mut is not None and not 0.0 <= self.p_mut <= 1.0:
            raise ValueError("p_mut must lie in [0, 1]")
        if not 0.0 <= self.p_cross <= 1.0:
            raise ValueError("p_cross must lie in [0, 1]")

    def mutation_rate(self, c: int) -> float:
        return self.p_mut if self.p_mut is not None else 1.0 / c


@dataclass(frozen=True)
class GenerationStats:
    generation: int
    best_score: float
    mean_score: float
    new_survival: int
    evaluations_performed: int
    cache_hits: int
    best_genotype: str
    front_size: int


@dataclass
class SearchState:
    generation: int = 0
    population: List[Individual] = field(default_factory=list)
    stats: List[GenerationStats] = field(default_factory=list)
    evaluated: Dict[Genotype, Individual] = field(default_factory=dict)

    @property
    def best(self) -> Individual:
        return min(self.population, key=lambda ind: (ind.objectives, ind.text))


def _individuals(
    genotypes: Sequence[Genotype], evaluations: Sequence[Evaluation], generation: int
) -> List[Individual]:
    if len(evaluations) != len(genotypes):
        raise RuntimeError(f"evaluator returned {len(evaluations)} results for {len(genotypes)} genotypes")
    return [
        Individual(g, tuple(result.objectives), payload=result.payload, born=generation)
        for g, result in zip(genotypes, evaluations)
    ]


def _record(
    state: SearchState, previous: set, evaluations: Sequence[Evaluation], fronts: List[List[Individual]]
) -> GenerationStats:
    current = {ind.genotype for ind in state.population}
    scores = [ind.score for ind in state.population]
    best = state.best
    stats = GenerationStats(
        generation=state.generation,
        best_score=min(scores),
        mean_score=float(np.mean(scores)),
        new_survival=len(current - previous),
        evaluations_performed=sum(1 for result in evaluations if not result.cached),
        cache_hits=sum(1 for result in evaluations if result.cached),
        best_genotype=best.text,
        front_size=len(fronts[0]) if fronts else 0,
    )
    state.stats.append(stats)
    log.info(
        "generation",
        generation=stats.generation,
        best_score=round(stats.best_score, 6),
        mean_score=round(stats.mean_score, 6),
        new_survival=stats.new_survival,
        evaluated=stats.evaluations_performed,
        cache_hits=stats.cache_hits,
        best=stats.best_genotype,
    )
    return stats


def run_search(n: int, c: int, config: SearchConfig, evaluator: BatchEvaluator, seed: int = 0) -> SearchState:
    """Evolve ``config.p_size`` genotypes for ``config.gen`` generations.

    Generation 1 is the evaluated random initial population.
    """
    rng = np.random.default_rng(seed)
    p_mut = config.mutation_rate(c)
    state = SearchState(generation=1)

    initial = [sample(n, c, rng) for _ in range(config.p_size)]
    evaluations = evaluator.evaluate_batch(initial, 1)
    state.population = _individuals(initial, evaluations, 1)
    state.evaluated.update((ind.genotype, ind) for ind in state.population)
    fronts = assign_ranks(state.population)
    _record(state, set(), evaluations, fronts)

    for generation in range(2, config.gen + 1):
        state.generation = generation
        previous = {ind.genotype for ind in state.population}
        offspring: List[Genotype] = []
        while len(offspring) < config.p_size:
            first = binary_tournament(state.population, rng)
            second = binary_tournament(state.population, rng)
            if rng.random() < config.p_cross:
                children = crossover(first.genotype, second.genotype, rng)
            else:
                children = (first.genotype, second.genotype)
            for child in children:
                if len(offspring) < config.p_size:
                    offspring.append(mutate(child, n, p_mut, rng))
        evaluations = evaluator.evaluate_batch(offspring, generation)
        children_individuals = _individuals(offspring, evaluations, generation)
        for ind in children_individuals:
            state.evaluated.setdefault(ind.genotype, ind)
        state.population = select_survivors(state.population + children_individuals, config.p_size)
        fronts = assign_ranks(state.population)
        _record(state, previous, evaluations, fronts)
    return state
