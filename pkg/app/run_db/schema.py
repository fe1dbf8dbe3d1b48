"""SQLAlchemy schema definitions for the runs.sqlite ledger."""

from __future__ import annotations

from sqlalchemy import (
    Column,
    DateTime,
    Float,
    Index,
    Integer,
    MetaData,
    String,
    Table,
    Text,
    UniqueConstraint,
)
from sqlalchemy.sql import func, text

metadata = MetaData()

SCHEMA_VERSION = 1

runs = Table(
    "runs",
    metadata,
    Column("run_id", Integer, primary_key=True, autoincrement=True),
    Column("command", String, nullable=False),
    Column("config_hash", String, nullable=False),
    Column("seed", Integer, nullable=False),
    Column("status", String, nullable=False, server_default=text("'running'")),
    Column("detail", Text),
    Column("started_at", DateTime, nullable=False, server_default=func.now()),
    Column("finished_at", DateTime),
)
Index("idx_runs_command", runs.c.command)

evaluations = Table(
    "evaluations",
    metadata,
    Column("evaluation_id", Integer, primary_key=True, autoincrement=True),
    Column("fingerprint", String, nullable=False),
    Column("genotype", String, nullable=False),
    Column("err_val", Float, nullable=False),
    Column("l_rate", Float, nullable=False),
    Column("sim", Float, nullable=False),
    Column("score", Float, nullable=False),
    Column("acc_val", Float, nullable=False),
    Column("valid", Integer, nullable=False, server_default=text("1")),
    Column("loss_history", Text, nullable=False, server_default=text("'[]'")),
    Column("total_params", Integer, nullable=False, server_default=text("0")),
    Column("trainable_params", Integer, nullable=False, server_default=text("0")),
    Column("wall_time", Float, nullable=False, server_default=text("0")),
    Column("error", Text),
    Column("created_at", DateTime, nullable=False, server_default=func.now()),
    UniqueConstraint("fingerprint", "genotype", name="uq_evaluations_fingerprint_genotype"),
)

metadata_table = Table(
    "metadata",
    metadata,
    Column("key", String, primary_key=True),
    Column("value", String, nullable=False),
)

ALL_TABLES = (runs, evaluations, metadata_table)
