"""Helpers and metadata for the runs.sqlite ledger."""

from .migrations import apply_migrations
from .operations import (
    EvaluationLedger,
    RunNotFoundError,
    fetch_evaluation,
    fetch_recent_runs,
    finish_run,
    get_run_db_engine,
    record_evaluation,
    start_run,
)
from .schema import ALL_TABLES, SCHEMA_VERSION, evaluations, metadata, metadata_table, runs

__all__ = [
    "SCHEMA_VERSION",
    "ALL_TABLES",
    "metadata",
    "runs",
    "evaluations",
    "metadata_table",
    "apply_migrations",
    "get_run_db_engine",
    "start_run",
    "finish_run",
    "fetch_recent_runs",
    "record_evaluation",
    "fetch_evaluation",
    "EvaluationLedger",
    "RunNotFoundError",
]
