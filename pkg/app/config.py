"""Run configuration: defaults file, user file, environment and CLI overrides."""

from __future__ import annotations

import hashlib
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parents[1]
ENV_PATH = BASE_DIR / ".env"
DEFAULT_CONFIG_PATH = BASE_DIR / "app" / "default_config.cfg"
USER_CONFIG_PATH = BASE_DIR / "user_config.cfg"
ENV_PREFIX = "SEARCH_"

# Load environment variables if a .env file exists.
if ENV_PATH.exists():
    load_dotenv(ENV_PATH)


class ConfigError(ValueError):
    """Raised for unknown keys or values outside their allowed range."""


def _convert_scalar(value: str) -> Any:
    value = value.strip()
    if value in {"", "~", "null", "Null", "NULL", "none", "None"}:
        return None
    if value.startswith('"') and value.endswith('"'):
        return value[1:-1]
    if value.startswith("'") and value.endswith("'"):
        return value[1:-1]
    lowered = value.lower()
    if lowered in {"true", "yes", "on"}:
        return True
    if lowered in {"false", "no", "off"}:
        return False
    try:
        return int(value)
    except ValueError:
        pass
    try:
        return float(value)
    except ValueError:
        return value


def parse_key_values(text: str, *, source: str = "<config>") -> Dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    values: Dict[str, str] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got {raw_line!r}")
        if key in values:
            raise ConfigError(f"{source}:{number}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def _load_config(path: Path) -> Dict[str, Any]:
    if not path.exists():
        return {}
    raw = parse_key_values(path.read_text(encoding="utf-8"), source=str(path))
    return {key: _convert_scalar(value) for key, value in raw.items()}


CONFIG: Dict[str, Any] = {}
CONFIG.update(_load_config(DEFAULT_CONFIG_PATH))
CONFIG.update(_load_config(USER_CONFIG_PATH))


def _str_to_bool(value: Optional[str], *, default: bool = False) -> bool:
    if value is None:
        return default
    value = value.strip().lower()
    if value in {"1", "true", "yes", "y", "on"}:
        return True
    if value in {"0", "false", "no", "n", "off"}:
        return False
    return default


def _env_name(key: str) -> str:
    return f"{ENV_PREFIX}{key.upper()}"


def _config_get(key: str, default: Any = None) -> Any:
    env_value = os.getenv(_env_name(key))
    if env_value is not None:
        return _convert_scalar(env_value)
    return CONFIG.get(key, default)


def _config_int(key: str, default: int) -> int:
    value = _config_get(key)
    return default if value is None else int(value)


def _config_float(key: str, default: float) -> float:
    value = _config_get(key)
    return default if value is None else float(value)


def _config_optional_float(key: str) -> Optional[float]:
    value = _config_get(key)
    return None if value is None else float(value)


def _config_bool(key: str, default: bool) -> bool:
    value = _config_get(key)
    if isinstance(value, bool):
        return value
    if value is None:
        return default
    return _str_to_bool(str(value), default=default)


def _config_str(key: str, default: str) -> str:
    value = _config_get(key)
    return default if value is None else str(value)


def _config_path(key: str, fallback: Path) -> Path:
    value = _config_get(key)
    path = Path(str(value)).expanduser() if value else fallback
    return path if path.is_absolute() else (BASE_DIR / path)


def _config_optional_path(key: str) -> Optional[Path]:
    value = _config_get(key)
    return Path(str(value)).expanduser() if value else None


def _split_list(value: Any) -> List[str]:
    if value is None:
        return []
    return [part.strip() for part in str(value).split(",") if part.strip()]


def _config_list(key: str, default: Tuple[str, ...]) -> Tuple[str, ...]:
    items = _split_list(_config_get(key))
    return tuple(items) if items else default


def _config_int_list(key: str, default: Tuple[int, ...]) -> Tuple[int, ...]:
    items = _split_list(_config_get(key))
    return tuple(int(item) for item in items) if items else default


@dataclass(frozen=True)
class Settings:
    """Run configuration (one value per config key)."""

    dataset: str = _config_str("dataset", "synthetic")
    data_path: Optional[Path] = _config_optional_path("data_path")
    num_classes: int = _config_int("num_classes", 10)
    samples_per_class: int = _config_int("samples_per_class", 200)
    image_size: int = _config_int("image_size", 32)
    synth_noise: float = _config_float("synth_noise", 1.0)
    val_size: int = _config_int("val_size", 10000)
    records_per_file: int = _config_int("records_per_file", 10000)
    split: str = _config_str("split", "holdout")

    seed_archs: Tuple[str, ...] = _config_list(
        "seed_archs", ("plain-a", "plain-b", "residual-a", "residual-b")
    )
    c: int = _config_int("c", 3)
    gen: int = _config_int("gen", 10)
    p_size: int = _config_int("p_size", 12)
    p_mut: Optional[float] = _config_optional_float("p_mut")
    p_cross: float = _config_float("p_cross", 1.0)
    alpha: float = _config_float("alpha", 25.0)
    beta: float = _config_float("beta", 25.0)
    objectives: Tuple[str, ...] = _config_list("objectives", ("score",))

    seed_epochs: int = _config_int("seed_epochs", 10)
    head_epochs: int = _config_int("head_epochs", 5)
    finetune_epochs: int = _config_int("finetune_epochs", 15)
    learning_rate: float = _config_float("learning_rate", 0.05)
    finetune_learning_rate: float = _config_float("finetune_learning_rate", 0.01)
    momentum: float = _config_float("momentum", 0.9)
    weight_decay: float = _config_float("weight_decay", 5e-4)
    batch_size: int = _config_int("batch_size", 64)
    eval_batch_size: int = _config_int("eval_batch_size", 256)
    head_hidden: Tuple[int, ...] = _config_int_list("head_hidden", (128, 128))

    seed: int = _config_int("seed", 1)
    out_dir: Path = _config_path("out_dir", BASE_DIR / "runs")
    workers: int = _config_int("workers", 1)
    cutout: bool = _config_bool("cutout", False)
    cutout_length: int = _config_int("cutout_length", 16)
    random_flip: bool = _config_bool("random_flip", False)
    use_baseline_adapters: bool = _config_bool("use_baseline_adapters", False)
    score_cache: bool = _config_bool("score_cache", True)
    persist_cache: bool = _config_bool("persist_cache", False)
    record_timing: bool = _config_bool("record_timing", False)
    finetune_scope: str = _config_str("finetune_scope", "final")
    finetune_limit: int = _config_int("finetune_limit", 20)
    finetune_bn_update: bool = _config_bool("finetune_bn_update", True)
    log_level: str = _config_str("log_level", "INFO")
    log_json: bool = _config_bool("log_json", False)

    def __post_init__(self) -> None:
        self.validate()

    # Keys that change where or how verbosely a run executes, never its results.
    OPERATIONAL_KEYS = frozenset({"out_dir", "workers", "log_level", "log_json", "record_timing", "persist_cache"})

    @property
    def n(self) -> int:
        return len(self.seed_archs)

    @property
    def run_db_path(self) -> Path:
        return self.out_dir / "runs.sqlite"

    def stage_dir(self, stage: str) -> Path:
        return self.out_dir / stage

    def ensure_out_dir(self) -> None:
        """Create the run output directory if missing."""
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def validate(self) -> None:
        problems = []
        for name in (
            "num_classes", "samples_per_class", "image_size", "val_size", "records_per_file", "c", "gen", "p_size",
            "head_epochs", "finetune_epochs", "batch_size", "eval_batch_size", "workers", "finetune_limit",
        ):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be >= 1")
        for name in ("seed_epochs", "cutout_length"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        for name in ("p_cross",) + (("p_mut",) if self.p_mut is not None else ()):
            if not 0.0 <= getattr(self, name) <= 1.0:
                problems.append(f"{name} must lie in [0, 1]")
        for name in ("alpha", "beta", "learning_rate", "finetune_learning_rate", "weight_decay", "synth_noise"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            problems.append("momentum must lie in [0, 1)")
        if not self.seed_archs:
            problems.append("seed_archs must name at least one architecture")
        if self.dataset not in {"synthetic", "cifar10", "cifar100"}:
            problems.append(f"dataset must be synthetic, cifar10 or cifar100 (got {self.dataset!r})")
        if self.split not in {"holdout", "full"}:
            problems.append(f"split must be holdout or full (got {self.split!r})")
        if self.finetune_scope not in {"final", "history"}:
            problems.append(f"finetune_scope must be final or history (got {self.finetune_scope!r})")
        unknown_objectives = sorted(set(self.objectives) - {"score", "err_val", "params"})
        if not self.objectives or unknown_objectives:
            problems.append(f"objectives must be drawn from score, err_val, params (got {self.objectives})")
        if problems:
            raise ConfigError("; ".join(problems))

    @classmethod
    def from_file(cls, path: Path, base: Optional["Settings"] = None) -> "Settings":
        """Apply a run config file on top of ``base`` (defaults when omitted)."""
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file {path} not found")
        raw = parse_key_values(path.read_text(encoding="utf-8"), source=str(path))
        return (base or cls()).apply_strings(raw, source=str(path))

    def apply_strings(self, raw: Mapping[str, str], *, source: str = "overrides") -> "Settings":
        known = {f.name for f in fields(self)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"{source}: unknown config keys: {', '.join(unknown)}")
        return self.with_overrides(**{key: _COERCE[key](value) for key, value in raw.items()})

    def with_overrides(self, **overrides: Any) -> "Settings":
        """Return a copy of the settings with specified attributes replaced."""
        return replace(self, **overrides)

    def to_dict(self) -> Dict[str, Any]:
        """Expose a dict representation for manifests/logging."""
        payload = asdict(self)
        for key, value in payload.items():
            if isinstance(value, Path):
                payload[key] = str(value)
            elif isinstance(value, tuple):
                payload[key] = list(value)
        return payload

    def canonical_text(self, *, include_operational: bool = False) -> str:
        payload = self.to_dict()
        lines = []
        for key in sorted(payload):
            if key in self.OPERATIONAL_KEYS and not include_operational:
                continue
            value = payload[key]
            if isinstance(value, list):
                value = ",".join(str(item) for item in value)
            lines.append(f"{key} = {'' if value is None else value}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()


def _to_bool(value: str) -> bool:
    lowered = value.strip().lower()
    if lowered not in {"1", "true", "yes", "y", "on", "0", "false", "no", "n", "off"}:
        raise ConfigError(f"expected a boolean, got {value!r}")
    return _str_to_bool(lowered)


def _optional(convert: Callable[[str], Any]) -> Callable[[str], Any]:
    def wrapped(value: str) -> Any:
        return None if _convert_scalar(value) is None else convert(value)

    return wrapped


def _strict(convert: Callable[[str], Any], what: str) -> Callable[[str], Any]:
    def wrapped(value: str) -> Any:
        try:
            return convert(value.strip())
        except ValueError as exc:
            raise ConfigError(f"expected {what}, got {value!r}") from exc

    return wrapped


_INT = _strict(int, "an integer")
_FLOAT = _strict(float, "a number")
_COERCE: Dict[str, Callable[[str], Any]] = {
    "dataset": str.strip,
    "data_path": _optional(lambda v: Path(v.strip()).expanduser()),
    "split": str.strip,
    "seed_archs": lambda v: tuple(_split_list(v)),
    "p_mut": _optional(_FLOAT),
    "objectives": lambda v: tuple(_split_list(v)),
    "head_hidden": _strict(lambda v: tuple(int(item) for item in _split_list(v)), "comma-separated integers"),
    "out_dir": lambda v: Path(v.strip()).expanduser(),
    "finetune_scope": str.strip,
    "log_level": lambda v: v.strip().upper(),
}
for _field in fields(Settings):
    if _field.name in _COERCE:
        continue
    _default = _field.default
    if isinstance(_default, bool):
        _COERCE[_field.name] = _to_bool
    elif isinstance(_default, int):
        _COERCE[_field.name] = _INT
    elif isinstance(_default, float):
        _COERCE[_field.name] = _FLOAT
    else:
        _COERCE[_field.name] = str.strip
