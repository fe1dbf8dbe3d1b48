"""Operational helpers for the runs.sqlite ledger."""

from __future__ import annotations

import json
from functools import lru_cache
from pathlib import Path
from typing import Any, List, Optional

from sqlalchemy import create_engine, select, update
from sqlalchemy.dialects.sqlite import insert as sqlite_insert
from sqlalchemy.engine import Engine
from sqlalchemy.sql import func

from ..evaluator import ScoreReport
from ..genotype import Genotype
from .migrations import apply_migrations
from .schema import evaluations, runs

RUN_STATUSES = {"running", "ok", "failed"}


class RunNotFoundError(LookupError):
    """Raised when a run entry cannot be found in runs.sqlite."""


@lru_cache(maxsize=None)
def get_run_db_engine(db_path: Path) -> Engine:
    """Return a cached SQLAlchemy engine for the runs.sqlite path."""
    return create_engine(f"sqlite:///{Path(db_path)}", future=True)


def start_run(db_path: Path, *, command: str, config_hash: str, seed: int) -> int:
    """Insert a ``running`` row for a CLI invocation and return its id."""
    apply_migrations(db_path)
    engine = get_run_db_engine(db_path)
    with engine.begin() as conn:
        result = conn.execute(runs.insert().values(command=command, config_hash=config_hash, seed=seed))
        return int(result.inserted_primary_key[0])


def finish_run(db_path: Path, run_id: int, *, status: str, detail: Optional[str] = None) -> None:
    if status not in RUN_STATUSES:
        raise ValueError(f"Unsupported run status {status!r}")
    apply_migrations(db_path)
    engine = get_run_db_engine(db_path)
    with engine.begin() as conn:
        result = conn.execute(
            update(runs)
            .where(runs.c.run_id == run_id)
            .values(status=status, detail=detail, finished_at=func.now())
        )
        if result.rowcount == 0:
            raise RunNotFoundError(f"Run with id {run_id} not found in runs.sqlite")


def fetch_recent_runs(db_path: Path, *, limit: int = 20, command: Optional[str] = None) -> List[dict[str, Any]]:
    """Return recent runs ordered by newest first."""
    apply_migrations(db_path)
    engine = get_run_db_engine(db_path)
    stmt = select(runs).order_by(runs.c.started_at.desc(), runs.c.run_id.desc()).limit(limit)
    if command:
        stmt = stmt.where(runs.c.command == command)
    with engine.connect() as conn:
        rows = conn.execute(stmt).mappings().all()
    return [dict(row) for row in rows]


def _report_values(report: ScoreReport) -> dict[str, Any]:
    return {
        "genotype": str(report.genotype),
        "err_val": report.err_val,
        "l_rate": report.l_rate,
        "sim": report.sim,
        "score": report.score,
        "acc_val": report.acc_val,
        "valid": int(report.valid),
        "loss_history": json.dumps(list(report.loss_history)),
        "total_params": report.total_params,
        "trainable_params": report.trainable_params,
        "wall_time": report.wall_time,
        "error": report.error or None,
    }


def record_evaluation(db_path: Path, *, fingerprint: str, report: ScoreReport) -> None:
    """Upsert one search-stage report under ``fingerprint``."""
    apply_migrations(db_path)
    engine = get_run_db_engine(db_path)
    values = _report_values(report)
    stmt = sqlite_insert(evaluations).values(fingerprint=fingerprint, **values)
    stmt = stmt.on_conflict_do_update(
        index_elements=[evaluations.c.fingerprint, evaluations.c.genotype],
        set_={key: value for key, value in values.items() if key != "genotype"},
    )
    with engine.begin() as conn:
        conn.execute(stmt)


def fetch_evaluation(db_path: Path, *, fingerprint: str, genotype: Genotype) -> Optional[ScoreReport]:
    apply_migrations(db_path)
    engine = get_run_db_engine(db_path)
    stmt = select(evaluations).where(
        evaluations.c.fingerprint == fingerprint,
        evaluations.c.genotype == str(genotype),
    )
    with engine.connect() as conn:
        row = conn.execute(stmt).mappings().first()
    if row is None:
        return None
    return ScoreReport(
        genotype=genotype,
        err_val=row["err_val"],
        l_rate=row["l_rate"],
        sim=row["sim"],
        score=row["score"],
        loss_history=tuple(json.loads(row["loss_history"])),
        acc_val=row["acc_val"],
        valid=bool(row["valid"]),
        total_params=row["total_params"],
        trainable_params=row["trainable_params"],
        wall_time=row["wall_time"],
        error=row["error"] or "",
    )


class EvaluationLedger:
    """Persistent report store for the score cache, scoped to one fingerprint."""

    def __init__(self, db_path: Path, fingerprint: str) -> None:
        self.db_path = Path(db_path)
        self.fingerprint = fingerprint

    def fetch(self, g: Genotype) -> Optional[ScoreReport]:
        return fetch_evaluation(self.db_path, fingerprint=self.fingerprint, genotype=g)

    def record(self, report: ScoreReport) -> None:
        record_evaluation(self.db_path, fingerprint=self.fingerprint, report=report)
