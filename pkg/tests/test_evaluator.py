from pathlib import Path
import sys
from dataclasses import replace

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

import numpy as np  # noqa: E402
import pytest  # noqa: E402

from app import evaluator as evaluator_module  # noqa: E402
from app.config import Settings  # noqa: E402
from app.datasets import synth_dataset  # noqa: E402
from app.evaluator import (  # noqa: E402
    CandidateEvaluator,
    EvalConfig,
    ScoreCache,
    ScoreReport,
    assemble,
    compose_score,
    compute_l_rate,
    compute_sim,
    derive_seed,
    evaluate,
    fine_tune,
    run_ablation,
)
from app.genotype import Genotype  # noqa: E402
from app.knowledge_base import build_knowledge_base  # noqa: E402
from app.model_zoo import HeadSpec, build_seed, make_arch, train_seed  # noqa: E402
from app.training import OptimConfig, accuracy  # noqa: E402

FAST = EvalConfig(
    head_epochs=2,
    finetune_epochs=1,
    head_optim=OptimConfig(0.05, 0.9, 0.0, 16),
    finetune_optim=OptimConfig(0.01, 0.9, 5e-4, 16),
    head_hidden=(8,),
    eval_batch_size=64,
)


def _report(g: Genotype, score: float = 0.5, **kwargs) -> ScoreReport:
    values = dict(err_val=0.5, l_rate=0.0, sim=compute_sim(g), score=score, loss_history=(1.0, 1.0), acc_val=0.5)
    values.update(kwargs)
    return ScoreReport(genotype=g, **values)


@pytest.mark.parametrize(
    "code,expected",
    [((1, 1, 1, 1, 1), 1.0), ((1, 2, 3, 4, 5), 0.2), ((1, 1, 2, 3, 1), 0.4), ((3,), 1.0), ((2, 2, 1), 2 / 3)],
)
def test_compute_sim(code, expected) -> None:
    assert compute_sim(Genotype(code)) == pytest.approx(expected)


def test_compute_sim_matches_prefix_run_oracle() -> None:
    rng = np.random.default_rng(0)
    for _ in range(20):
        code = tuple(int(gene) for gene in rng.integers(1, 3, size=6))
        run = 1
        while run < len(code) and code[run] == code[0]:
            run += 1
        assert compute_sim(Genotype(code)) == run / len(code)


def test_compute_l_rate() -> None:
    assert compute_l_rate([2.0, 1.0]) == 0.5
    assert compute_l_rate([2.0, 1.5, 1.0]) == 0.5
    assert compute_l_rate([1.3, 1.3]) == 0.0
    assert compute_l_rate([1.0, 1.5]) == 0.0
    with pytest.raises(ValueError):
        compute_l_rate([1.0])
    with pytest.raises(ValueError):
        compute_l_rate([0.0, 0.0])


def test_compose_score() -> None:
    assert compose_score(0.40, 0.5, 0.2, 25, 25) == pytest.approx(-7.1)
    assert compose_score(0.3, 0.9, 1.0, 0, 0) == 0.3
    rng = np.random.default_rng(1)
    for _ in range(100):
        err, l_rate, sim, alpha, beta = rng.random(5) * np.array([1, 1, 1, 50, 50])
        score = compose_score(err, l_rate, sim, alpha, beta)
        assert abs(score - (err - alpha * l_rate + beta * sim)) < 1e-9


def test_higher_sim_worsens_score() -> None:
    assert compose_score(0.3, 0.2, 0.6, 25, 25) > compose_score(0.3, 0.2, 0.4, 25, 25)


def test_derive_seed_is_stable_and_purpose_specific() -> None:
    g = Genotype((1, 2, 1))

    assert derive_seed(0, g, "head") == derive_seed(0, Genotype((1, 2, 1)), "head")
    assert derive_seed(0, g, "head") != derive_seed(0, g, "head-shuffle")
    assert derive_seed(0, g, "head") != derive_seed(1, g, "head")
    assert 0 <= derive_seed(0, g, "head") < 2**64


def test_eval_config_validation() -> None:
    with pytest.raises(ValueError):
        EvalConfig(alpha=-1)
    with pytest.raises(ValueError):
        EvalConfig(head_epochs=0)
    with pytest.raises(ValueError):
        EvalConfig(objectives=("accuracy",))


def test_eval_config_from_settings() -> None:
    settings = Settings().with_overrides(alpha=10.0, beta=30.0, cutout=True, cutout_length=8, head_hidden=(32,))

    cfg = EvalConfig.from_settings(settings)

    assert (cfg.alpha, cfg.beta, cfg.cutout_length, cfg.head_hidden) == (10.0, 30.0, 8, (32,))
    assert cfg.finetune_optim.weight_decay == settings.weight_decay
    assert cfg.head_optim.weight_decay == 0.0
    assert EvalConfig.from_settings(settings.with_overrides(cutout=False)).cutout_length == 0


def test_assembled_network_trains_only_the_head(tiny_kb) -> None:
    network = assemble(Genotype((2, 1, 2)), tiny_kb, head_hidden=(8,), num_classes=4, head_seed=0)

    head_params = sum(ps.num_trainable() for _, ps in network.block("head").param_groups())
    assert network.num_trainable() == head_params == 32 * 8 + 8 + 8 * 4 + 4
    assert network.frozen_prefix_length() == len(network) - 1


def test_assembly_is_deterministic_per_head_seed(tiny_kb, tiny_dataset) -> None:
    images, _ = tiny_dataset.subset("val")
    g = Genotype((1, 2, 1))

    first = assemble(g, tiny_kb, head_hidden=(8,), num_classes=4, head_seed=9).forward(images)
    second = assemble(g, tiny_kb, head_hidden=(8,), num_classes=4, head_seed=9).forward(images)

    np.testing.assert_array_equal(first, second)


def test_evaluate_report_is_consistent_and_repeatable(tiny_kb, tiny_dataset) -> None:
    g = Genotype((1, 2, 1))
    fingerprint = tiny_kb.fingerprint()

    report = evaluate(g, tiny_kb, tiny_dataset, FAST)
    again = evaluate(g, tiny_kb, tiny_dataset, FAST)

    assert report.valid
    assert len(report.loss_history) == FAST.head_epochs
    assert 0.0 <= report.err_val <= 1.0
    assert 0.0 <= report.l_rate <= 1.0
    assert report.sim == pytest.approx(1 / 3)
    assert report.score - report.err_val + FAST.alpha * report.l_rate - FAST.beta * report.sim == pytest.approx(
        0.0, abs=1e-9
    )
    assert report.err_val == pytest.approx(1.0 - report.acc_val)
    assert report.trainable_params == 48 * 8 + 8 + 8 * 4 + 4
    assert replace(report, wall_time=0.0) == replace(again, wall_time=0.0)
    assert tiny_kb.fingerprint() == fingerprint


def test_zero_weights_make_score_equal_error(tiny_kb, tiny_dataset) -> None:
    report = evaluate(Genotype((2, 2, 1)), tiny_kb, tiny_dataset, replace(FAST, alpha=0.0, beta=0.0))

    assert report.score == report.err_val


def test_baseline_adapters_add_trainable_parameters(tiny_kb, tiny_dataset) -> None:
    free = evaluate(Genotype((2, 1, 2)), tiny_kb, tiny_dataset, FAST)
    baseline = evaluate(Genotype((2, 1, 2)), tiny_kb, tiny_dataset, replace(FAST, use_baseline_adapters=True))

    assert baseline.trainable_params == free.trainable_params + (6 * 4 + 4) + (8 * 4 + 4)
    assert baseline.total_params > free.total_params


def test_fine_tune_with_zero_learning_rate_keeps_search_error(tiny_kb, tiny_dataset) -> None:
    cfg = replace(FAST, finetune_optim=OptimConfig(0.0, 0.9, 5e-4, 16), finetune_bn_update=False)

    result = fine_tune(Genotype((1, 2, 1)), tiny_kb, tiny_dataset, cfg)

    assert result.val_error == pytest.approx(result.search_report.err_val)
    assert result.test_error is not None
    assert len(result.loss_history) == cfg.finetune_epochs


def test_fine_tune_updates_inherited_modules_through_adapters(tiny_kb, tiny_dataset) -> None:
    g = Genotype((2, 1, 2))
    stored = tiny_kb.record(1, 2).weights[0]["a.weight"].copy()
    fingerprint = tiny_kb.fingerprint()

    result = fine_tune(g, tiny_kb, tiny_dataset, replace(FAST, finetune_optim=OptimConfig(0.05, 0.9, 0.0, 16)))

    tuned = result.network.state_dict()["cell1.0.a.weight"]
    assert not np.array_equal(tuned, stored)
    assert result.network.num_trainable() == result.network.num_params()
    assert tiny_kb.fingerprint() == fingerprint


def test_fine_tune_without_test_split_reports_none(tiny_kb, tiny_dataset) -> None:
    splits = dict(tiny_dataset.splits)
    splits["test"] = splits["test"][:0]
    dataset = replace(tiny_dataset, splits=splits)

    result = fine_tune(Genotype((1, 1, 1)), tiny_kb, dataset, FAST)

    assert result.test_error is None


class _CountingEvaluate:
    def __init__(self, fail_on=()) -> None:
        self.calls = []
        self.fail_on = set(fail_on)

    def __call__(self, g, kb, dataset, cfg):
        self.calls.append((g, cfg.use_baseline_adapters))
        if g in self.fail_on:
            raise RuntimeError("boom")
        score = float(sum(g.code)) + (0.5 if cfg.use_baseline_adapters else 0.0)
        return _report(g, score=score, err_val=score / 10)


def test_score_cache_hits_and_bypass() -> None:
    g = Genotype((1, 2))
    cache = ScoreCache(enabled=True)
    cache.put(_report(g))

    assert cache.lookup(g) == _report(g)
    assert cache.lookup(Genotype((2, 1))) is None
    assert g in cache and len(cache) == 1

    disabled = ScoreCache(enabled=False)
    disabled.put(_report(g))
    assert disabled.lookup(g) is None
    assert len(disabled) == 0


def test_score_cache_consults_store() -> None:
    g = Genotype((2, 2))

    class Store:
        def __init__(self) -> None:
            self.saved = {}

        def fetch(self, genotype):
            return self.saved.get(genotype)

        def record(self, report):
            self.saved[report.genotype] = report

    store = Store()
    ScoreCache(store=store).put(_report(g))
    fresh = ScoreCache(store=store)

    assert fresh.lookup(g) == _report(g)
    assert g in fresh


def test_batch_evaluation_uses_cache_and_dedupes(monkeypatch) -> None:
    fake = _CountingEvaluate()
    monkeypatch.setattr(evaluator_module, "evaluate", fake)
    candidate = CandidateEvaluator(None, None, FAST)
    a, b = Genotype((1, 2)), Genotype((2, 2))

    first = candidate.evaluate_batch([a, b, a], generation=1)
    second = candidate.evaluate_batch([b, Genotype((1, 1))], generation=2)

    assert [g for g, _ in fake.calls] == [a, b, Genotype((1, 1))]
    assert [result.cached for result in first] == [False, False, True]
    assert [result.cached for result in second] == [True, False]
    assert first[0].objectives == (3.0,)
    assert first[2].payload is first[0].payload
    assert [record.generation for record in candidate.records] == [1, 1, 1, 2, 2]


def test_disabled_cache_retrains_every_request(monkeypatch) -> None:
    fake = _CountingEvaluate()
    monkeypatch.setattr(evaluator_module, "evaluate", fake)
    candidate = CandidateEvaluator(None, None, FAST, cache=ScoreCache(enabled=False))
    a = Genotype((1, 2))

    candidate.evaluate_batch([a], generation=1)
    results = candidate.evaluate_batch([a], generation=2)

    assert len(fake.calls) == 2
    assert not results[0].cached


def test_failing_candidate_becomes_invalid(monkeypatch) -> None:
    bad = Genotype((2, 1))
    monkeypatch.setattr(evaluator_module, "evaluate", _CountingEvaluate(fail_on=[bad]))
    candidate = CandidateEvaluator(None, None, FAST)

    good_result, bad_result = candidate.evaluate_batch([Genotype((1, 1)), bad], generation=1)

    report = bad_result.payload
    assert good_result.payload.valid
    assert not report.valid
    assert "boom" in report.error
    assert (report.err_val, report.l_rate, report.acc_val) == (1.0, 0.0, 0.0)
    assert report.sim == compute_sim(bad) == 0.5
    assert report.score == pytest.approx(1.0 + 0.5 * FAST.beta)
    assert report.score - report.err_val + FAST.alpha * report.l_rate - FAST.beta * report.sim == 0.0


def test_worker_pool_preserves_order(monkeypatch) -> None:
    monkeypatch.setattr(evaluator_module, "evaluate", _CountingEvaluate())
    genotypes = [Genotype((i, j)) for i in range(1, 4) for j in range(1, 4)]

    serial = CandidateEvaluator(None, None, FAST).evaluate_batch(genotypes, 1)
    pooled = CandidateEvaluator(None, None, FAST, workers=4).evaluate_batch(genotypes, 1)

    assert [r.objectives for r in serial] == [r.objectives for r in pooled]
    assert [r.payload.genotype for r in pooled] == genotypes


def test_objective_vector_follows_config(monkeypatch) -> None:
    monkeypatch.setattr(evaluator_module, "evaluate", _CountingEvaluate())
    cfg = replace(FAST, objectives=("score", "err_val", "params"))

    (result,) = CandidateEvaluator(None, None, cfg).evaluate_batch([Genotype((2, 3))], 1)

    assert result.objectives == (5.0, 0.5, 0.0)


def test_run_ablation_pairs_both_adapter_modes(monkeypatch) -> None:
    fake = _CountingEvaluate()
    monkeypatch.setattr(evaluator_module, "evaluate", fake)
    genotypes = [Genotype((2, 1)), Genotype((1, 2)), Genotype((2, 1))]

    rows = run_ablation(genotypes, None, None, FAST)

    assert [str(row.genotype) for row in rows] == ["1-2", "2-1"]
    assert all(row.baseline.score == row.param_free.score + 0.5 for row in rows)
    assert sorted(fake.calls, key=lambda call: (str(call[0]), call[1])) == [
        (Genotype((1, 2)), False),
        (Genotype((1, 2)), True),
        (Genotype((2, 1)), False),
        (Genotype((2, 1)), True),
    ]


@pytest.mark.slow
def test_fine_tuned_constant_genotype_keeps_seed_error() -> None:
    dataset = synth_dataset(7, 4, 100, image_size=16, noise=0.5)
    head = HeadSpec.from_hidden((16,), dataset.num_classes)
    specs = [
        make_arch("plain", "plain", (8, 16, 24), 3, head),
        make_arch("residual", "residual", (12, 8, 16), 3, head),
    ]
    seeds = []
    for index, spec in enumerate(specs):
        network = build_seed(spec, 10 + index, dataset.image_size)
        train_seed(network, dataset, 8, OptimConfig(0.05, 0.9, 5e-4, 32), seed=index)
        seeds.append((spec, network))
    kb = build_knowledge_base(seeds, c=3, input_size=dataset.image_size)
    cfg = EvalConfig(
        head_epochs=5,
        finetune_epochs=5,
        head_optim=OptimConfig(0.05, 0.9, 0.0, 32),
        finetune_optim=OptimConfig(0.01, 0.9, 5e-4, 32),
        head_hidden=(16,),
    )
    val_x, val_y = dataset.subset("val")

    for arch_id, (_, network) in enumerate(seeds, start=1):
        seed_error = 1.0 - accuracy(network, val_x, val_y)

        result = fine_tune(Genotype.constant(arch_id, 3), kb, dataset, cfg)

        assert result.val_error <= seed_error + 0.02, (arch_id, seed_error, result.val_error)
