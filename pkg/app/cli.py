"""CLI entry point for the knowledge-inherited architecture search."""

from __future__ import annotations

import contextlib
import hashlib
import json
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

import click
import numpy as np
import structlog

from .config import ConfigError, Settings
from .datasets import Dataset, DatasetFormatError, load_cifar10, load_cifar100, make_augment, synth_dataset
from .evaluator import (
    CandidateEvaluator,
    EvalConfig,
    FineTuneError,
    ScoreCache,
    derive_seed,
    fine_tune,
    run_ablation,
)
from .genotype import Genotype, GenotypeError
from .knowledge_base import (
    MANIFEST_NAME,
    KnowledgeBase,
    KnowledgeBaseError,
    build_knowledge_base,
    load_knowledge_base,
    save_knowledge_base,
)
from .logging_setup import configure_logging
from .model_zoo import ArchSpec, ArchSpecError, HeadSpec, build_seed, seed_catalog, train_seed
from .nsga2 import SearchConfig, run_search
from .reports import (
    ABLATION_FIELDS,
    EVALUATION_FIELDS,
    FINAL_POPULATION_FIELDS,
    FINETUNE_FIELDS,
    GENERATION_FIELDS,
    SEED_EPOCH_FIELDS,
    SEED_SUMMARY_FIELDS,
    ReportError,
    adjacent_agreement,
    build_report_context,
    evaluation_row,
    rank_by_score,
    read_csv,
    read_manifest,
    render_report,
    write_csv,
    write_manifest,
)
from .run_db import EvaluationLedger, fetch_recent_runs, finish_run, start_run
from .tensor import TensorFormatError, load_tensors, save_tensors
from .training import OptimConfig, accuracy

log = structlog.get_logger(__name__)

SEEDS_STAGE = "seeds"
KB_STAGE = "kb"
SEARCH_STAGE = "search"
FINETUNE_STAGE = "finetune"
ABLATION_STAGE = "ablation"
CATALOG_NAME = "catalog.json"
STAGE_MANIFEST = "manifest.json"

# Domain failures surfaced as a one-line error instead of a traceback.
DOMAIN_ERRORS = (
    ArchSpecError,
    ConfigError,
    DatasetFormatError,
    FileNotFoundError,
    FineTuneError,
    GenotypeError,
    KnowledgeBaseError,
    ReportError,
    TensorFormatError,
)


def _load_settings() -> Settings:
    return Settings()


def _parse_assignments(values: Sequence[str]) -> Dict[str, str]:
    raw: Dict[str, str] = {}
    for item in values:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise click.ClickException(f"Invalid --set value {item!r}; expected KEY=VALUE.")
        raw[key.strip()] = value.strip()
    return raw


def _resolve_settings(
    config_path: Optional[Path],
    out_dir: Optional[Path],
    seed: Optional[int],
    workers: Optional[int],
    assignments: Sequence[str],
) -> Settings:
    try:
        settings = _load_settings()
        if config_path is not None:
            settings = Settings.from_file(config_path, base=settings)
        settings = settings.apply_strings(_parse_assignments(assignments), source="--set")
        overrides: Dict[str, Any] = {}
        if out_dir is not None:
            overrides["out_dir"] = out_dir
        if seed is not None:
            overrides["seed"] = seed
        if workers is not None:
            overrides["workers"] = workers
        return settings.with_overrides(**overrides) if overrides else settings
    except ConfigError as exc:
        raise click.ClickException(str(exc)) from exc


@contextlib.contextmanager
def _ledger(settings: Settings, command: str) -> Iterator[None]:
    """Record the invocation in runs.sqlite and translate domain errors."""
    settings.ensure_out_dir()
    run_id = start_run(settings.run_db_path, command=command, config_hash=settings.config_hash(), seed=settings.seed)
    structlog.contextvars.bind_contextvars(command=command, run_id=run_id)
    try:
        yield
    except DOMAIN_ERRORS as exc:
        finish_run(settings.run_db_path, run_id, status="failed", detail=str(exc))
        raise click.ClickException(str(exc)) from exc
    except click.ClickException as exc:
        finish_run(settings.run_db_path, run_id, status="failed", detail=exc.format_message())
        raise
    except BaseException as exc:
        finish_run(settings.run_db_path, run_id, status="failed", detail=repr(exc))
        raise
    else:
        finish_run(settings.run_db_path, run_id, status="ok")
    finally:
        structlog.contextvars.unbind_contextvars("command", "run_id")


def _require(path: Path, command: str) -> Path:
    if not path.exists():
        raise click.ClickException(f"{path} is missing; run `{command}` first.")
    return path


def _load_dataset(settings: Settings) -> Dataset:
    if settings.dataset == "synthetic":
        return synth_dataset(
            settings.seed,
            settings.num_classes,
            settings.samples_per_class,
            image_size=settings.image_size,
            noise=settings.synth_noise,
        )
    if settings.data_path is None:
        raise click.ClickException(f"dataset {settings.dataset} needs data_path to be set.")
    if settings.dataset == "cifar10":
        return load_cifar10(
            settings.data_path,
            val_size=settings.val_size,
            seed=settings.seed,
            split=settings.split,
            records_per_file=settings.records_per_file,
        )
    return load_cifar100(
        settings.data_path,
        val_size=settings.val_size,
        seed=settings.seed,
        split=settings.split,
        train_records=5 * settings.records_per_file,
        test_records=settings.records_per_file,
    )


def _head_spec(settings: Settings, dataset: Dataset) -> HeadSpec:
    return HeadSpec.from_hidden(settings.head_hidden, dataset.num_classes)


def _load_seed_catalog(settings: Settings) -> Tuple[int, List[Tuple[ArchSpec, Path]]]:
    seeds_dir = settings.stage_dir(SEEDS_STAGE)
    catalog = json.loads(_require(seeds_dir / CATALOG_NAME, "train-seeds").read_text(encoding="utf-8"))
    entries = []
    for entry in catalog["seeds"]:
        entries.append((ArchSpec.from_dict(entry["spec"]), _require(seeds_dir / entry["file"], "train-seeds")))
    return int(catalog["input_size"]), entries


def _load_kb(settings: Settings) -> KnowledgeBase:
    kb_dir = settings.stage_dir(KB_STAGE)
    _require(kb_dir / MANIFEST_NAME, "build-kb")
    kb = load_knowledge_base(kb_dir)
    if (kb.n, kb.c) != (settings.n, settings.c):
        raise click.ClickException(
            f"knowledge base is {kb.c}x{kb.n} but the config asks for c={settings.c}, n={settings.n}; rerun `build-kb`."
        )
    return kb


def _spread(genotypes: Sequence[Tuple[float, Genotype]], limit: int) -> List[Genotype]:
    """Up to ``limit`` genotypes evenly spaced over the score-sorted list."""
    ordered = sorted(genotypes, key=lambda item: (item[0], str(item[1])))
    if len(ordered) <= limit:
        return [g for _, g in ordered]
    picks = sorted(set(np.linspace(0, len(ordered) - 1, limit).round().astype(int).tolist()))
    return [ordered[index][1] for index in picks]


def _scored_genotypes(rows: Sequence[Dict[str, str]], *, valid_only: bool = True) -> List[Tuple[float, Genotype]]:
    seen: Dict[str, Tuple[float, Genotype]] = {}
    for row in rows:
        if valid_only and row.get("valid", "1") != "1":
            continue
        seen.setdefault(row["genotype"], (float(row["score"]), Genotype.parse(row["genotype"])))
    return list(seen.values())


@click.group()
@click.option("--config", "config_path", type=click.Path(path_type=Path), default=None, help="Run config file.")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), default=None, help="Output directory.")
@click.option("--seed", type=int, default=None, help="Run seed.")
@click.option("--workers", type=click.IntRange(min=1), default=None, help="Concurrent evaluations.")
@click.option("--set", "assignments", multiple=True, metavar="KEY=VALUE", help="Override a config key.")
@click.pass_context
def cli(
    ctx: click.Context,
    config_path: Optional[Path],
    out_dir: Optional[Path],
    seed: Optional[int],
    workers: Optional[int],
    assignments: Tuple[str, ...],
) -> None:
    """Knowledge-inherited architecture search CLI."""
    settings = _resolve_settings(config_path, out_dir, seed, workers, assignments)
    configure_logging(settings.log_level, settings.log_json)
    ctx.obj = settings


@cli.command("train-seeds")
@click.pass_obj
def train_seeds_command(settings: Settings) -> None:
    """Train the n seed architectures and save their weights."""
    with _ledger(settings, "train-seeds"):
        dataset = _load_dataset(settings)
        specs = seed_catalog(settings.seed_archs, settings.c, _head_spec(settings, dataset))
        seeds_dir = settings.stage_dir(SEEDS_STAGE)
        seeds_dir.mkdir(parents=True, exist_ok=True)
        optim = OptimConfig(settings.learning_rate, settings.momentum, settings.weight_decay, settings.batch_size)
        augment = make_augment(settings.cutout_length if settings.cutout else 0, settings.random_flip)
        epoch_rows: List[Dict[str, Any]] = []
        summary_rows: List[Dict[str, Any]] = []
        catalog = []
        for arch_id, spec in enumerate(specs, start=1):
            network = build_seed(spec, derive_seed(settings.seed, spec.name, "seed-init"), dataset.image_size)
            result = train_seed(
                network,
                dataset,
                settings.seed_epochs,
                optim,
                seed=derive_seed(settings.seed, spec.name, "seed-shuffle"),
                augment=augment,
                eval_batch_size=settings.eval_batch_size,
                name=spec.name,
            )
            weight_file = f"seed_{arch_id}.mntw"
            save_tensors(seeds_dir / weight_file, network.state_dict())
            catalog.append({"arch_id": arch_id, "file": weight_file, "spec": spec.to_dict()})
            epoch_rows.extend(
                {"arch_id": arch_id, "name": spec.name, **asdict(metrics)} for metrics in result.history
            )
            val_x, val_y = dataset.subset("val")
            test_error = None
            if dataset.size("test"):
                test_x, test_y = dataset.subset("test")
                test_error = 1.0 - accuracy(network, test_x, test_y, settings.eval_batch_size)
            summary_rows.append(
                {
                    "arch_id": arch_id,
                    "name": spec.name,
                    "family": spec.family,
                    "total_params": network.num_params(),
                    "val_error": 1.0 - accuracy(network, val_x, val_y, settings.eval_batch_size),
                    "test_error": test_error,
                }
            )
        (seeds_dir / CATALOG_NAME).write_text(
            json.dumps({"input_size": dataset.image_size, "seeds": catalog}, indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        write_csv(seeds_dir / "seeds.csv", SEED_EPOCH_FIELDS, epoch_rows)
        write_csv(seeds_dir / "seeds_summary.csv", SEED_SUMMARY_FIELDS, summary_rows)
        write_manifest(
            seeds_dir / STAGE_MANIFEST,
            command="train-seeds",
            settings=settings,
            extra={"dataset": dataset.name, "normalization": dataset.normalization()},
        )
    for row in summary_rows:
        click.echo(f"{row['arch_id']}: {row['name']} val_error={row['val_error']:.4f}")
    click.echo(f"Seed weights written to {seeds_dir}")


@cli.command("build-kb")
@click.pass_obj
def build_kb_command(settings: Settings) -> None:
    """Decompose the trained seeds into a validated knowledge base."""
    with _ledger(settings, "build-kb"):
        input_size, entries = _load_seed_catalog(settings)
        seeds = []
        for spec, weight_path in entries:
            network = build_seed(spec, 0, input_size)
            network.load_state_dict(load_tensors(weight_path))
            seeds.append((spec, network))
        kb = build_knowledge_base(seeds, c=settings.c, input_size=input_size)
        kb_dir = save_knowledge_base(kb, settings.stage_dir(KB_STAGE))
        write_manifest(
            kb_dir / STAGE_MANIFEST,
            command="build-kb",
            settings=settings,
            extra={"kb_fingerprint": kb.fingerprint()},
        )
    click.echo(f"Knowledge base ({kb.c} positions x {kb.n} architectures) written to {kb_dir}")


@cli.command("search")
@click.pass_obj
def search_command(settings: Settings) -> None:
    """Run the evolutionary search over the knowledge base."""
    with _ledger(settings, "search"):
        kb = _load_kb(settings)
        dataset = _load_dataset(settings)
        cfg = EvalConfig.from_settings(settings)
        store = None
        if settings.persist_cache:
            fingerprint = hashlib.sha256(f"{settings.config_hash()}:{kb.fingerprint()}".encode("utf-8")).hexdigest()
            store = EvaluationLedger(settings.run_db_path, fingerprint)
        evaluator = CandidateEvaluator(
            kb, dataset, cfg, cache=ScoreCache(enabled=settings.score_cache, store=store), workers=settings.workers
        )
        state = run_search(
            kb.n,
            kb.c,
            SearchConfig(settings.gen, settings.p_size, settings.p_mut, settings.p_cross),
            evaluator,
            seed=settings.seed,
        )
        search_dir = settings.stage_dir(SEARCH_STAGE)
        write_csv(
            search_dir / "evaluations.csv",
            EVALUATION_FIELDS,
            [
                evaluation_row(record.generation, record.report, record.cached, settings.record_timing)
                for record in evaluator.records
            ],
        )
        write_csv(search_dir / "generations.csv", GENERATION_FIELDS, [asdict(stats) for stats in state.stats])
        write_csv(
            search_dir / "final_population.csv",
            FINAL_POPULATION_FIELDS,
            [
                {
                    "genotype": ind.text,
                    "rank": ind.rank,
                    "crowding": ind.crowding,
                    "score": ind.payload.score,
                    "err_val": ind.payload.err_val,
                    "l_rate": ind.payload.l_rate,
                    "sim": ind.payload.sim,
                }
                for ind in sorted(state.population, key=lambda ind: (ind.rank, ind.score, ind.text))
            ],
        )
        write_manifest(
            search_dir / STAGE_MANIFEST,
            command="search",
            settings=settings,
            extra={"kb_fingerprint": kb.fingerprint(), "normalization": dataset.normalization()},
        )
    best = state.best
    click.echo(f"Best genotype {best.text} score={best.score:.4f} after {state.generation} generations")
    click.echo(f"Search results written to {search_dir}")


@cli.command("finetune")
@click.option("--scope", type=click.Choice(["final", "history"]), default=None, help="Genotypes to fine-tune.")
@click.option("--limit", type=click.IntRange(min=1), default=None, help="Maximum number of genotypes.")
@click.pass_obj
def finetune_command(settings: Settings, scope: Optional[str], limit: Optional[int]) -> None:
    """Fine-tune searched genotypes with every parameter trainable."""
    scope = scope or settings.finetune_scope
    limit = limit or settings.finetune_limit
    with _ledger(settings, "finetune"):
        search_dir = settings.stage_dir(SEARCH_STAGE)
        source = "final_population.csv" if scope == "final" else "evaluations.csv"
        rows = read_csv(_require(search_dir / source, "search"))
        genotypes = _spread(_scored_genotypes(rows, valid_only=scope == "history"), limit)
        kb = _load_kb(settings)
        dataset = _load_dataset(settings)
        cfg = EvalConfig.from_settings(settings)
        results = []
        for g in genotypes:
            try:
                outcome = fine_tune(g, kb, dataset, cfg)
            except FineTuneError as exc:
                log.warning("finetune_skipped", genotype=str(g), error=str(exc))
                continue
            results.append(
                {
                    "genotype": str(g),
                    "score": outcome.search_report.score,
                    "err_val": outcome.search_report.err_val,
                    "val_error": outcome.val_error,
                    "test_error": outcome.test_error,
                    "total_params": outcome.network.num_params(),
                }
            )
        if not results:
            raise click.ClickException("No genotype could be fine-tuned.")
        finetune_dir = settings.stage_dir(FINETUNE_STAGE)
        write_csv(finetune_dir / "finetune.csv", FINETUNE_FIELDS, rank_by_score(results))
        write_manifest(
            finetune_dir / STAGE_MANIFEST,
            command="finetune",
            settings=settings,
            extra={"scope": scope, "limit": limit, "kb_fingerprint": kb.fingerprint()},
        )
    best = min(results, key=lambda row: (row["val_error"], row["genotype"]))
    click.echo(f"Fine-tuned {len(results)} genotypes; best {best['genotype']} val_error={best['val_error']:.4f}")


@cli.command("ablate-adapters")
@click.option("--limit", type=click.IntRange(min=2), default=None, help="Maximum number of genotypes.")
@click.pass_obj
def ablate_adapters_command(settings: Settings, limit: Optional[int]) -> None:
    """Re-evaluate searched genotypes with 1x1-convolution adapters."""
    with _ledger(settings, "ablate-adapters"):
        rows = read_csv(_require(settings.stage_dir(SEARCH_STAGE) / "evaluations.csv", "search"))
        genotypes = _spread(_scored_genotypes(rows), limit or settings.finetune_limit)
        kb = _load_kb(settings)
        dataset = _load_dataset(settings)
        ablation = run_ablation(genotypes, kb, dataset, EvalConfig.from_settings(settings), workers=settings.workers)
        ablation_dir = settings.stage_dir(ABLATION_STAGE)
        table = [
            {
                "genotype": str(row.genotype),
                "err_val_param_free": row.param_free.err_val,
                "err_val_baseline": row.baseline.err_val,
                "score_param_free": row.param_free.score,
                "score_baseline": row.baseline.score,
                "params_param_free": row.param_free.total_params,
                "params_baseline": row.baseline.total_params,
            }
            for row in ablation
        ]
        write_csv(ablation_dir / "ablation.csv", ABLATION_FIELDS, table)
        write_manifest(ablation_dir / STAGE_MANIFEST, command="ablate-adapters", settings=settings)
        agreement = adjacent_agreement(
            [row["genotype"] for row in table],
            [row["err_val_param_free"] for row in table],
            [row["err_val_baseline"] for row in table],
        )
    click.echo(f"Ablation over {len(table)} genotypes written to {ablation_dir}")
    if agreement is not None:
        click.echo(f"Adjacent-pair ranking agreement: {agreement:.3f}")


@cli.command("report")
@click.pass_obj
def report_command(settings: Settings) -> None:
    """Render report.md from the stage outputs."""
    with _ledger(settings, "report"):
        seeds = read_csv(_require(settings.stage_dir(SEEDS_STAGE) / "seeds_summary.csv", "train-seeds"))
        search_dir = settings.stage_dir(SEARCH_STAGE)
        generations = read_csv(_require(search_dir / "generations.csv", "search"))
        finetune = read_csv(_require(settings.stage_dir(FINETUNE_STAGE) / "finetune.csv", "finetune"))
        ablation_path = settings.stage_dir(ABLATION_STAGE) / "ablation.csv"
        context = build_report_context(
            manifest=read_manifest(search_dir / STAGE_MANIFEST),
            seeds=seeds,
            generations=generations,
            finetune=finetune,
            ablation=read_csv(ablation_path) if ablation_path.exists() else None,
        )
        report_path = settings.out_dir / "report.md"
        report_path.write_text(render_report(context), encoding="utf-8")
    click.echo(f"Report written to {report_path}")
    if context.correlation is not None:
        click.echo(f"Spearman(score, error) = {context.correlation:.3f}")


@cli.command("status")
@click.option("--limit", type=int, default=20, help="Number of recent runs to show.")
@click.option("--command", "command", default=None, help="Filter by command name.")
@click.pass_obj
def status_command(settings: Settings, limit: int, command: Optional[str]) -> None:
    """Display recent runs captured in runs.sqlite."""
    if not settings.run_db_path.exists():
        click.echo("No runs recorded.")
        return
    runs = fetch_recent_runs(settings.run_db_path, limit=limit, command=command)
    if not runs:
        click.echo("No runs recorded.")
        return

    header = f"Recent runs (limit {limit})"
    if command:
        header += f", command {command}"
    click.echo(header)
    columns = ["run_id", "started_at", "command", "status", "seed", "config_hash", "detail"]
    click.echo(" | ".join(columns))
    click.echo("-" * 80)
    for run in runs:
        row = []
        for column in columns:
            value = run.get(column)
            if column == "started_at" and value is not None:
                value = getattr(value, "isoformat", lambda: str(value))()
            elif column == "config_hash" and value:
                value = value[:12]
            row.append("" if value is None else str(value))
        click.echo(" | ".join(row))


def main() -> None:
    cli()


if __name__ == "__main__":
    main()
