"""Run configuration: nested dataclasses, JSON/TOML files and ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

from ..data import ConfigError, GenParams
from ..model import ModelConfig
from ..objectives import LossConfigError, LossWeights

SWITCHES = ("drop_code", "drop_demo", "drop_note", "no_transformers", "no_mag",
            "no_contrastive", "no_hierarchy", "no_code_centring")
MODEL_SWITCHES = ("drop_code", "drop_demo", "drop_note", "no_transformers", "no_mag", "no_code_centring")


@dataclass
class DataConfig:
    cohort: Optional[str] = None  # JSONL cohort; generated when absent
    ontology: Optional[str] = None  # ontology file; the default 12x10 hierarchy when absent
    n_patients: int = 600
    n_parents: int = 12
    children_per_parent: int = 10
    seed: int = 1  # cohort generation seed
    split_seed: int = 0
    split: tuple = (0.8, 0.1, 0.1)
    max_visits: int = 21
    max_words: int = 10000
    gen: GenParams = field(default_factory=GenParams)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 4
    max_epochs: int = 50
    early_stop_patience: int = 5
    optimizer: str = "adam"
    seed: int = 0
    eval_batch_size: int = 32
    ks: tuple = (5, 10, 20, 30)
    monitor_k: int = 30
    loss: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    drop_code: bool = False
    drop_demo: bool = False
    drop_note: bool = False
    no_transformers: bool = False
    no_mag: bool = False
    no_contrastive: bool = False
    no_hierarchy: bool = False
    no_code_centring: bool = False

    def resolved_model(self) -> ModelConfig:
        """Model config with the run-level ablation switches folded in."""
        flags = {s: getattr(self.model, s) or getattr(self, s) for s in MODEL_SWITCHES}
        return dataclasses.replace(self.model, **flags)

    def resolved_weights(self) -> LossWeights:
        w = dataclasses.replace(self.loss)
        if self.no_contrastive:
            w.bi_con = 0.0
        if self.no_hierarchy:
            w.hrchy = 0.0
        return w

    def validate(self) -> None:
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.monitor_k not in self.ks:
            raise ConfigError(f"monitor_k={self.monitor_k} must be one of ks={self.ks}")
        if any(k < 1 for k in self.ks):
            raise ConfigError("every k must be >= 1")
        try:
            self.resolved_weights().validate()
            self.resolved_model().validate()
        except (LossConfigError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc


def to_dict(obj) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [to_dict(v) for v in obj]
    return obj


def _build(cls, values: dict, path: str = ""):
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path}{key}")
        default = getattr(cls(), key) if _has_default(fields[key]) else None
        if dataclasses.is_dataclass(default):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path}{key} must be a table")
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value) if isinstance(value, (list, tuple)) else (value,)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def _has_default(f: dataclasses.Field) -> bool:
    return f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING


def from_dict(values: dict) -> TrainConfig:
    return _build(TrainConfig, values)


def _read_file(path) -> dict:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".toml":
        try:
            import tomllib  # type: ignore[import-not-found]
        except ImportError as exc:  # Python < 3.11
            raise ConfigError("TOML configs need Python 3.11+; use a JSON config instead") from exc
        return tomllib.loads(text)
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(values: dict, overrides: Sequence[str]) -> dict:
    """Set dotted keys from ``key=value`` strings; values are parsed as JSON when possible."""
    values = json.loads(json.dumps(values))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = values
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-table value")
        node[parts[-1]] = _coerce(raw)
    return values


def load_config(path=None, overrides: Sequence[str] = ()) -> TrainConfig:
    values = to_dict(TrainConfig())
    if path is not None:
        values = _merge(values, _read_file(path))
    cfg = from_dict(apply_overrides(values, overrides))
    cfg.validate()
    return cfg


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def canonical_json(values) -> str:
    return json.dumps(values, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(canonical_json(to_dict(cfg)).encode()).hexdigest()[:16]
