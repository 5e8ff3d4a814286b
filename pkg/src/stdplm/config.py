"""Experiment configuration.

A config file is TOML (or JSON) with four tables, every key optional::

    task = "forecast"            # or "impute"

    [data]
    data_path = "data/PEMS08/PEMS08.npz"
    adjacency_path = "data/PEMS08/PEMS08.csv"

    [model]                      # full-size defaults
    d_t = 64
    d_n = 64
    k = 64
    n_regions = 128
    d_hidden = 128
    d_plm = 768
    layers = 3

    [train]
    lr = 1e-3
    epochs = 500
    patience = 50

    [missing]
    pattern = "rm"
    rate = 0.7

See the dataclasses below for the full schema.
"""
from __future__ import annotations

import ast
import json
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from .errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class ModelConfig:
    d_t: int = 64
    d_n: int = 64
    k: int = 64
    n_regions: int = 128
    d_hidden: int = 128
    d_plm: int = 768
    layers: int = 3
    t_in: int = 12
    t_out: int = 12
    channels: int = 1
    sga_heads: int = 1
    backbone: str = "gpt2"  # "gpt2" (pre-trained, LoRA) or "scratch" (encoder)
    backbone_heads: int = 12
    pretrained: str = "gpt2"
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.0
    interval_seconds: int = 300

    def __post_init__(self) -> None:
        if self.backbone not in ("gpt2", "scratch"):
            raise ConfigError(f"backbone must be 'gpt2' or 'scratch', got {self.backbone!r}")
        for name in ("d_t", "d_n", "k", "n_regions", "d_hidden", "d_plm", "t_in", "t_out", "channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if self.t_in < 2:
            raise ConfigError("model.t_in must be at least 2")
        if self.layers < 0:
            raise ConfigError("model.layers must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    data_path: str = ""
    adjacency_path: str = ""
    name: str = ""
    channels: tuple[int, ...] = (0,)
    binarize_adjacency: bool = True
    start: str | None = None  # ISO date of the first sample when the file has no timestamps


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.01
    epochs: int = 500
    patience: int = 50
    batch_size: int = 64
    lambda_c: float = 0.1
    seeds: tuple[int, ...] = (0,)
    few_shot_ratio: float | None = None
    device: str = "cpu"
    eval_batch_size: int = 128


@dataclass(frozen=True)
class MissingConfig:
    pattern: str = "none"  # "none", "rm" or "cm"
    rate: float = 0.7
    seed: int = 0
    condition_ratio: tuple[float, float] = (0.1, 0.9)

    def __post_init__(self) -> None:
        if self.pattern not in ("none", "rm", "cm"):
            raise ConfigError(f"missing.pattern must be none/rm/cm, got {self.pattern!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ConfigError(f"missing.rate must lie in [0, 1], got {self.rate}")
        lo, hi = self.condition_ratio
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"missing.condition_ratio must satisfy 0 <= lo <= hi <= 1, got {self.condition_ratio}")


@dataclass(frozen=True)
class ExperimentConfig:
    task: str = "forecast"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    missing: MissingConfig = field(default_factory=MissingConfig)

    def __post_init__(self) -> None:
        if self.task not in ("forecast", "impute"):
            raise ConfigError(f"task must be 'forecast' or 'impute', got {self.task!r}")
        if self.task == "impute" and self.model.t_out != self.model.t_in:
            raise ConfigError("imputation reconstructs the input window: t_out must equal t_in")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def with_overrides(self, overrides: dict[str, Any]) -> "ExperimentConfig":
        data = self.to_dict()
        for dotted, value in overrides.items():
            node = data
            *parents, leaf = dotted.split(".")
            for key in parents:
                if key not in node or not isinstance(node[key], dict):
                    raise ConfigError(f"unknown config section {dotted!r}")
                node = node[key]
            if leaf not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[leaf] = value
        return from_dict(data)


def _build(cls, values: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in values.items():
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value or {})
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def from_dict(values: dict[str, Any]) -> ExperimentConfig:
    return _build(ExperimentConfig, values)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    try:
        if path.suffix == ".json":
            values = json.loads(path.read_text())
        else:
            with path.open("rb") as fh:
                values = tomllib.load(fh)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return from_dict(values)


def parse_override(text: str) -> tuple[str, Any]:
    """``section.key=value`` with value parsed as a Python/TOML-ish literal."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    lowered = raw.strip().lower()
    if lowered in ("true", "false"):
        return key.strip(), lowered == "true"
    try:
        return key.strip(), ast.literal_eval(raw.strip())
    except (ValueError, SyntaxError):
        return key.strip(), raw.strip()


__all__ = [
    "DataConfig",
    "ExperimentConfig",
    "MissingConfig",
    "ModelConfig",
    "TrainConfig",
    "from_dict",
    "load_config",
    "parse_override",
]
