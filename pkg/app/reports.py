"""CSV artifacts, run manifests and the Markdown run report."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence

from jinja2 import Environment, FileSystemLoader, select_autoescape
from scipy import stats as scipy_stats

TEMPLATES_DIR = Path(__file__).resolve().parent / "templates" / "report"

SEED_EPOCH_FIELDS = ["arch_id", "name", "epoch", "train_loss", "val_accuracy"]
SEED_SUMMARY_FIELDS = ["arch_id", "name", "family", "total_params", "val_error", "test_error"]
EVALUATION_FIELDS = [
    "generation",
    "genotype",
    "err_val",
    "l_rate",
    "sim",
    "score",
    "acc_val",
    "valid",
    "total_params",
    "cached",
    "wall_time",
]
GENERATION_FIELDS = [
    "generation",
    "best_score",
    "mean_score",
    "new_survival",
    "evaluations_performed",
    "cache_hits",
    "best_genotype",
]
FINAL_POPULATION_FIELDS = ["genotype", "rank", "crowding", "score", "err_val", "l_rate", "sim"]
FINETUNE_FIELDS = ["genotype", "score", "err_val", "val_error", "test_error", "total_params"]
ABLATION_FIELDS = [
    "genotype",
    "err_val_param_free",
    "err_val_baseline",
    "score_param_free",
    "score_baseline",
    "params_param_free",
    "params_baseline",
]


class ReportError(RuntimeError):
    """Raised when report inputs are missing or inconsistent."""


def format_value(value: Any) -> str:
    """Text form used in every CSV cell; floats keep their shortest exact repr."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[Mapping[str, Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.DictWriter(handle, fieldnames=list(fieldnames), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({name: format_value(row.get(name)) for name in fieldnames})
    return path


def read_csv(path: Path) -> List[Dict[str, str]]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"{path} not found")
    with path.open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def evaluation_row(generation: int, report: Any, cached: bool, record_timing: bool = False) -> Dict[str, Any]:
    """One evaluations.csv row; ``wall_time`` stays empty unless timing is recorded."""
    return {
        "generation": generation,
        "genotype": str(report.genotype),
        "err_val": report.err_val,
        "l_rate": report.l_rate,
        "sim": report.sim,
        "score": report.score,
        "acc_val": report.acc_val,
        "valid": report.valid,
        "total_params": report.total_params,
        "cached": cached,
        "wall_time": report.wall_time if record_timing else None,
    }


def write_manifest(path: Path, *, command: str, settings: Any, extra: Optional[Mapping[str, Any]] = None) -> Path:
    """JSON manifest of a stage; holds no timestamps so reruns compare equal."""
    config = {key: value for key, value in settings.to_dict().items() if key not in settings.OPERATIONAL_KEYS}
    payload = {
        "command": command,
        "config_hash": settings.config_hash(),
        "seed": settings.seed,
        "config": config,
        **dict(extra or {}),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_manifest(path: Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ReportError(f"{path} not found")
    return json.loads(path.read_text(encoding="utf-8"))


def spearman(xs: Sequence[float], ys: Sequence[float]) -> Optional[float]:
    """Spearman rank correlation, or ``None`` when undefined."""
    if len(xs) != len(ys):
        raise ValueError("spearman needs equally long sequences")
    if len(xs) < 3:
        return None
    result = scipy_stats.spearmanr(xs, ys)
    value = float(result[0])
    return None if math.isnan(value) else value


def adjacent_agreement(labels: Sequence[str], reference: Sequence[float], other: Sequence[float]) -> Optional[float]:
    """Share of adjacent pairs (ordered by ``reference``) whose order ``other`` keeps.

    Pairs tied under ``reference`` are skipped; ``None`` when no pair is left.
    """
    if not len(labels) == len(reference) == len(other):
        raise ValueError("adjacent_agreement needs aligned sequences")
    order = sorted(range(len(labels)), key=lambda i: (reference[i], labels[i]))
    agree = total = 0
    for a, b in zip(order, order[1:]):
        delta = reference[b] - reference[a]
        if delta == 0:
            continue
        total += 1
        agree += int((other[b] - other[a]) * delta >= 0)
    return agree / total if total else None


def rank_by_score(rows: Sequence[Mapping[str, Any]], *, descending: bool = True) -> List[Mapping[str, Any]]:
    """Order result rows by score, ties by genotype text."""
    ordered = sorted(rows, key=lambda row: str(row["genotype"]))
    return sorted(ordered, key=lambda row: float(row["score"]), reverse=descending)


@dataclass
class ReportContext:
    run: Dict[str, Any]
    seeds: List[Dict[str, str]]
    generations: List[Dict[str, str]]
    finetune: List[Mapping[str, Any]]
    best_seed: Optional[Dict[str, str]]
    best_searched: Optional[Mapping[str, Any]]
    correlation: Optional[float]
    ablation_agreement: Optional[float]
    ablation_pairs: int

    def as_dict(self) -> Dict[str, Any]:
        return dict(self.__dict__)


def build_report_context(
    *,
    manifest: Mapping[str, Any],
    seeds: List[Dict[str, str]],
    generations: List[Dict[str, str]],
    finetune: List[Dict[str, str]],
    ablation: Optional[List[Dict[str, str]]] = None,
) -> ReportContext:
    ranked = rank_by_score(finetune)
    usable = [row for row in finetune if row.get("test_error") not in (None, "")]
    error_key = "test_error" if usable else "val_error"
    usable = usable or finetune
    correlation = spearman(
        [float(row["score"]) for row in usable], [float(row[error_key]) for row in usable]
    )
    best_seed = min(seeds, key=lambda row: float(row["val_error"])) if seeds else None
    best_searched = min(finetune, key=lambda row: float(row["val_error"])) if finetune else None
    agreement = None
    pairs = 0
    if ablation:
        labels = [row["genotype"] for row in ablation]
        agreement = adjacent_agreement(
            labels,
            [float(row["err_val_param_free"]) for row in ablation],
            [float(row["err_val_baseline"]) for row in ablation],
        )
        pairs = max(len(ablation) - 1, 0)
    return ReportContext(
        run=dict(manifest),
        seeds=seeds,
        generations=generations,
        finetune=ranked,
        best_seed=best_seed,
        best_searched=best_searched,
        correlation=correlation,
        ablation_agreement=agreement,
        ablation_pairs=pairs,
    )


def _environment() -> Environment:
    env = Environment(
        loader=FileSystemLoader(str(TEMPLATES_DIR)),
        autoescape=select_autoescape(enabled_extensions=("html",)),
        trim_blocks=True,
        lstrip_blocks=True,
    )
    env.filters["num"] = lambda value, digits=4: "n/a" if value in (None, "") else f"{float(value):.{digits}f}"
    return env


def render_report(context: ReportContext) -> str:
    """Render the Markdown run summary."""
    return _environment().get_template("summary.md.j2").render(context.as_dict())
