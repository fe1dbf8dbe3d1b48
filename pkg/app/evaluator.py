"""Candidate assembly, search-stage scoring and full fine-tuning."""

from __future__ import annotations

import hashlib
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import structlog

from .adapters import AdapterBlock
from .datasets import Dataset, make_augment
from .genotype import Genotype, decode
from .knowledge_base import KnowledgeBase
from .model_zoo import build_head
from .nsga2 import Evaluation
from .tensor import Network, Sequential
from .training import OptimConfig, TrainingDivergedError, accuracy, fit, predict_logits

log = structlog.get_logger(__name__)

OBJECTIVES = ("score", "err_val", "params")


class FineTuneError(RuntimeError):
    """Raised when fine-tuning cannot produce a finite-loss network."""


@dataclass(frozen=True)
class EvalConfig:
    alpha: float = 25.0
    beta: float = 25.0
    head_epochs: int = 5
    finetune_epochs: int = 15
    head_optim: OptimConfig = field(default_factory=lambda: OptimConfig(0.05, 0.9, 0.0, 64))
    finetune_optim: OptimConfig = field(default_factory=lambda: OptimConfig(0.01, 0.9, 5e-4, 64))
    head_hidden: Tuple[int, ...] = (128, 128)
    eval_batch_size: int = 256
    seed: int = 0
    use_baseline_adapters: bool = False
    cutout_length: int = 0
    random_flip: bool = False
    finetune_bn_update: bool = True
    objectives: Tuple[str, ...] = ("score",)

    def __post_init__(self) -> None:
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.head_epochs < 1 or self.finetune_epochs < 1:
            raise ValueError("head_epochs and finetune_epochs must be >= 1")
        unknown = sorted(set(self.objectives) - set(OBJECTIVES))
        if not self.objectives or unknown:
            raise ValueError(f"unknown objectives {unknown or self.objectives}")

    @classmethod
    def from_settings(cls, settings: Any) -> "EvalConfig":
        return cls(
            alpha=settings.alpha,
            beta=settings.beta,
            head_epochs=settings.head_epochs,
            finetune_epochs=settings.finetune_epochs,
            head_optim=OptimConfig(settings.learning_rate, settings.momentum, 0.0, settings.batch_size),
            finetune_optim=OptimConfig(
                settings.finetune_learning_rate, settings.momentum, settings.weight_decay, settings.batch_size
            ),
            head_hidden=tuple(settings.head_hidden),
            eval_batch_size=settings.eval_batch_size,
            seed=settings.seed,
            use_baseline_adapters=settings.use_baseline_adapters,
            cutout_length=settings.cutout_length if settings.cutout else 0,
            random_flip=settings.random_flip,
            finetune_bn_update=settings.finetune_bn_update,
            objectives=tuple(settings.objectives),
        )


@dataclass(frozen=True)
class ScoreReport:
    """Search-stage outcome; lower ``score`` is better."""

    genotype: Genotype
    err_val: float
    l_rate: float
    sim: float
    score: float
    loss_history: Tuple[float, ...]
    acc_val: float
    valid: bool = True
    total_params: int = 0
    trainable_params: int = 0
    wall_time: float = 0.0
    error: str = ""

    def objectives(self, names: Sequence[str]) -> Tuple[float, ...]:
        lookup = {"score": self.score, "err_val": self.err_val, "params": float(self.total_params)}
        return tuple(lookup[name] for name in names)


def compute_l_rate(loss_history: Sequence[float]) -> float:
    """Relative loss decrease from the first to the last epoch, clamped to [0, 1]."""
    if len(loss_history) < 2:
        raise ValueError("loss history needs at least two epochs")
    first, last = float(loss_history[0]), float(loss_history[-1])
    if first <= 0:
        raise ValueError(f"first-epoch loss must be positive, got {first}")
    return min(max((first - last) / first, 0.0), 1.0)


def compute_sim(g: Genotype) -> float:
    """Length of the leading run of genes equal to the first gene, over ``c``."""

    def run(position: int) -> int:
        if position >= len(g.code) or g.code[position] != g.code[0]:
            return 0
        return 1 + run(position + 1)

    return run(0) / len(g.code)


def compose_score(err_val: float, l_rate: float, sim: float, alpha: float, beta: float) -> float:
    return err_val - alpha * l_rate + beta * sim


def derive_seed(base_seed: int, key: object, purpose: str) -> int:
    """Seed for one (genotype or seed network, purpose) pair, independent of evaluation order."""
    digest = hashlib.sha256(f"{base_seed}:{key}:{purpose}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def assemble(
    g: Genotype,
    kb: KnowledgeBase,
    *,
    head_hidden: Tuple[int, ...],
    num_classes: int,
    head_seed: int,
    use_baseline: bool = False,
    head: Optional[Sequential] = None,
) -> Network:
    """Frozen modules joined by adapters, topped by a fresh (or supplied) head."""
    spec = decode(g, kb, head_hidden, num_classes, use_baseline=use_baseline)
    rng = np.random.default_rng(head_seed)
    blocks: List[Tuple[str, Any]] = []
    for index, (position, arch_id) in enumerate(spec.modules):
        blocks.append((f"cell{position}", kb.record(position, arch_id).build_block()))
        if index < len(spec.adapters):
            blocks.append((f"adapter{position}", AdapterBlock(spec.adapters[index], rng=rng)))
    blocks.append(("head", head if head is not None else build_head(spec.head_in_features, spec.head, rng)))
    return Network(blocks)


def _invalid_report(g: Genotype, cfg: EvalConfig, history: Sequence[float], reason: str, started: float) -> ScoreReport:
    # Worst error and no loss decrease; sim is still a property of the genotype.
    sim = compute_sim(g)
    return ScoreReport(
        genotype=g,
        err_val=1.0,
        l_rate=0.0,
        sim=sim,
        score=compose_score(1.0, 0.0, sim, cfg.alpha, cfg.beta),
        loss_history=tuple(history),
        acc_val=0.0,
        valid=False,
        wall_time=time.perf_counter() - started,
        error=reason,
    )


def _search_stage(g: Genotype, kb: KnowledgeBase, dataset: Dataset, cfg: EvalConfig) -> Tuple[Network, ScoreReport]:
    started = time.perf_counter()
    network = assemble(
        g,
        kb,
        head_hidden=cfg.head_hidden,
        num_classes=dataset.num_classes,
        head_seed=derive_seed(cfg.seed, g, "head"),
        use_baseline=cfg.use_baseline_adapters,
    )
    prefix = network.frozen_prefix_length()
    backbone, trainable = network.slice(0, prefix), network.slice(prefix)
    train_x, train_y = dataset.subset("train")
    val_x, val_y = dataset.subset("val")
    # The frozen prefix runs in eval mode only, so its features are computed once.
    train_features = predict_logits(backbone, train_x, cfg.eval_batch_size)
    val_features = predict_logits(backbone, val_x, cfg.eval_batch_size)
    rng = np.random.default_rng(derive_seed(cfg.seed, g, "head-shuffle"))
    try:
        history = fit(trainable, train_features, train_y, epochs=cfg.head_epochs, optim=cfg.head_optim, rng=rng)
    except TrainingDivergedError as exc:
        log.warning("candidate_diverged", genotype=str(g), error=str(exc))
        return network, _invalid_report(g, cfg, (), str(exc), started)
    acc_val = accuracy(trainable, val_features, val_y, cfg.eval_batch_size)
    err_val = 1.0 - acc_val
    try:
        l_rate = compute_l_rate(history)
    except ValueError:
        l_rate = 0.0
    sim = compute_sim(g)
    report = ScoreReport(
        genotype=g,
        err_val=err_val,
        l_rate=l_rate,
        sim=sim,
        score=compose_score(err_val, l_rate, sim, cfg.alpha, cfg.beta),
        loss_history=tuple(history),
        acc_val=acc_val,
        total_params=network.num_params(),
        trainable_params=network.num_trainable(),
        wall_time=time.perf_counter() - started,
    )
    return network, report


def evaluate(g: Genotype, kb: KnowledgeBase, dataset: Dataset, cfg: EvalConfig) -> ScoreReport:
    """Train a fresh head over the frozen modules and score the candidate."""
    return _search_stage(g, kb, dataset, cfg)[1]


@dataclass
class FineTuneResult:
    genotype: Genotype
    network: Network
    search_report: ScoreReport
    loss_history: List[float]
    val_error: float
    test_error: Optional[float]


def fine_tune(g: Genotype, kb: KnowledgeBase, dataset: Dataset, cfg: EvalConfig) -> FineTuneResult:
    """Search-stage head training, then every parameter trained for ``finetune_epochs``."""
    network, report = _search_stage(g, kb, dataset, cfg)
    if not report.valid:
        raise FineTuneError(f"{g}: search stage diverged ({report.error})")
    network.unfreeze()
    network.set_track_stats(cfg.finetune_bn_update)
    train_x, train_y = dataset.subset("train")
    rng = np.random.default_rng(derive_seed(cfg.seed, g, "finetune"))
    try:
        history = fit(
            network,
            train_x,
            train_y,
            epochs=cfg.finetune_epochs,
            optim=cfg.finetune_optim,
            rng=rng,
            augment=make_augment(cfg.cutout_length, cfg.random_flip),
        )
    except TrainingDivergedError as exc:
        raise FineTuneError(f"{g}: fine-tune diverged at epoch {exc.epoch}, batch {exc.batch} (loss {exc.loss})") from exc
    val_x, val_y = dataset.subset("val")
    val_error = 1.0 - accuracy(network, val_x, val_y, cfg.eval_batch_size)
    test_error: Optional[float] = None
    if dataset.size("test"):
        test_x, test_y = dataset.subset("test")
        test_error = 1.0 - accuracy(network, test_x, test_y, cfg.eval_batch_size)
    log.info("fine_tuned", genotype=str(g), val_error=val_error, test_error=test_error)
    return FineTuneResult(g, network, report, history, val_error, test_error)


# ----------------------------------------------------------------------------
# Caching and batch dispatch


class ReportStore(Protocol):
    def fetch(self, g: Genotype) -> Optional[ScoreReport]: ...

    def record(self, report: ScoreReport) -> None: ...


class ScoreCache:
    """Exact-genotype memo of search-stage reports, optionally backed by a store."""

    def __init__(self, enabled: bool = True, store: Optional[ReportStore] = None) -> None:
        self.enabled = enabled
        self.store = store
        self._reports: Dict[Genotype, ScoreReport] = {}
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._reports)

    def __contains__(self, g: Genotype) -> bool:
        return g in self._reports

    def lookup(self, g: Genotype) -> Optional[ScoreReport]:
        if not self.enabled:
            return None
        with self._lock:
            report = self._reports.get(g)
        if report is None and self.store is not None:
            report = self.store.fetch(g)
            if report is not None:
                with self._lock:
                    self._reports[g] = report
        return report

    def put(self, report: ScoreReport) -> None:
        if not self.enabled:
            return
        with self._lock:
            self._reports[report.genotype] = report
        if self.store is not None:
            self.store.record(report)


@dataclass(frozen=True)
class EvaluationRecord:
    generation: int
    report: ScoreReport
    cached: bool


class CandidateEvaluator:
    """Cache-aware batch evaluator dispatching distinct misses to a thread pool."""

    def __init__(
        self,
        kb: KnowledgeBase,
        dataset: Dataset,
        cfg: EvalConfig,
        *,
        cache: Optional[ScoreCache] = None,
        workers: int = 1,
    ) -> None:
        self.kb = kb
        self.dataset = dataset
        self.cfg = cfg
        self.cache = cache if cache is not None else ScoreCache(enabled=True)
        self.workers = max(1, workers)
        self.records: List[EvaluationRecord] = []

    def evaluate_one(self, g: Genotype) -> ScoreReport:
        started = time.perf_counter()
        try:
            return evaluate(g, self.kb, self.dataset, self.cfg)
        except Exception as exc:  # noqa: BLE001
            log.error("candidate_failed", genotype=str(g), error=repr(exc))
            return _invalid_report(g, self.cfg, (), repr(exc), started)

    def evaluate_batch(self, genotypes: Sequence[Genotype], generation: int) -> List[Evaluation]:
        reports: List[Optional[ScoreReport]] = [None] * len(genotypes)
        cached = [False] * len(genotypes)
        pending: Dict[Genotype, List[int]] = {}
        for index, g in enumerate(genotypes):
            hit = self.cache.lookup(g)
            if hit is not None:
                reports[index], cached[index] = hit, True
            elif g in pending:
                # repeat within the batch
                pending[g].append(index)
                cached[index] = self.cache.enabled
            else:
                pending[g] = [index]
        todo = list(pending)
        if self.workers > 1 and len(todo) > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as pool:
                fresh = list(pool.map(self.evaluate_one, todo))
        else:
            fresh = [self.evaluate_one(g) for g in todo]
        for g, report in zip(todo, fresh):
            self.cache.put(report)
            for index in pending[g]:
                reports[index] = report
        results = []
        for report, was_cached in zip(reports, cached):
            assert report is not None
            self.records.append(EvaluationRecord(generation, report, was_cached))
            results.append(Evaluation(report.objectives(self.cfg.objectives), report, was_cached))
        return results


# ----------------------------------------------------------------------------
# Adapter ablation


@dataclass(frozen=True)
class AblationRow:
    genotype: Genotype
    param_free: ScoreReport
    baseline: ScoreReport


def run_ablation(
    genotypes: Sequence[Genotype], kb: KnowledgeBase, dataset: Dataset, cfg: EvalConfig, *, workers: int = 1
) -> List[AblationRow]:
    """Evaluate each genotype with parameter-free and with 1x1-convolution adapters."""
    distinct = sorted(set(genotypes), key=str)
    free = CandidateEvaluator(kb, dataset, replace(cfg, use_baseline_adapters=False), workers=workers)
    conv = CandidateEvaluator(kb, dataset, replace(cfg, use_baseline_adapters=True), workers=workers)
    free_results = free.evaluate_batch(distinct, generation=0)
    conv_results = conv.evaluate_batch(distinct, generation=0)
    return [AblationRow(g, a.payload, b.payload) for g, a, b in zip(distinct, free_results, conv_results)]
