"""Run configuration: one YAML/JSON document, validated before any compute."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError
from .io import config_hash
from .search import PRESETS, SearchConfig

OUT_ENV = "HASA_OUT"


@dataclass(frozen=True)
class DataConfig:
    size: int = 64
    n_per_class: int = 50  # classification train
    n_test_per_class: int = 20
    n_train: int = 200  # segmentation
    n_test: int = 50
    seed: int = 0


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 30
    finetune_epochs: int = 5
    finetune_lr_scale: float = 0.1
    batch_size: int = 16
    lr: float = 3e-3
    lr_min: float = 3e-4
    cells: int = 5  # classification chain length / segmentation cells per block
    channels: int = 8
    augment: bool = True
    rotation_degrees: float = 20.0
    hflip_prob: float = 0.5


@dataclass(frozen=True)
class AggregationSection:
    mode: str = "sequential"  # sequential | dense | aspp
    aspp_rates: tuple[int, ...] = (1, 2, 4, 8)


@dataclass(frozen=True)
class EvalSection:
    average: str = "weighted"


@dataclass(frozen=True)
class RunConfig:
    task: str = "classification"
    seed: int = 0
    output_dir: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    train: TrainSection = field(default_factory=TrainSection)
    aggregation: AggregationSection = field(default_factory=AggregationSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self) -> str:
        """Hash of everything that affects computed results; the output location is left out."""
        d = self.to_dict()
        d.pop("output_dir")
        return config_hash(d)

    def validate(self) -> "RunConfig":
        def bad(path, msg):
            raise ConfigError(f"{path}: {msg}")

        if self.task not in ("classification", "segmentation"):
            bad("task", f"must be 'classification' or 'segmentation', got {self.task!r}")
        if self.search.task != self.task:
            bad("search.task", f"{self.search.task!r} disagrees with task {self.task!r}")
        self.search.validate()
        d = self.data
        if d.size < 16 or d.size % 16:
            bad("data.size", "must be a multiple of 16 (>= 16)")
        for name in ("n_per_class", "n_test_per_class", "n_train", "n_test"):
            if getattr(d, name) < 1:
                bad(f"data.{name}", "must be >= 1")
        t = self.train
        if t.epochs < 1:
            bad("train.epochs", "must be >= 1")
        if t.finetune_epochs < 0:
            bad("train.finetune_epochs", "must be >= 0")
        if t.batch_size < 1:
            bad("train.batch_size", "must be >= 1")
        if t.lr <= 0 or t.lr_min < 0:
            bad("train.lr", "learning rates must be positive")
        if not 0 < t.finetune_lr_scale <= 1:
            bad("train.finetune_lr_scale", "must lie in (0, 1]")
        lo = 3 if self.task == "classification" else 1
        if not lo <= t.cells <= 11:
            bad("train.cells", f"must lie in {lo}..11")
        if t.channels < 2 or t.channels % 2:
            bad("train.channels", "must be an even number >= 2")
        a = self.aggregation
        if a.mode not in ("sequential", "dense", "aspp"):
            bad("aggregation.mode", f"unknown mode {a.mode!r}")
        if a.mode == "aspp" and self.task != "segmentation":
            bad("aggregation.mode", "aspp applies to segmentation only")
        if a.mode == "aspp":
            from .reaggregate import validate_rates

            validate_rates(a.aspp_rates)
        if self.eval.average not in ("weighted", "macro"):
            bad("eval.average", "must be 'weighted' or 'macro'")
        return self


def _build(cls, raw, path: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
    out = {}
    for key, value in raw.items():
        default = getattr(cls(), key)
        if isinstance(default, tuple):
            value = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{path}.{key}: expected a boolean")
        elif isinstance(default, int) and not isinstance(value, bool):
            if not isinstance(value, int):
                raise ConfigError(f"{path}.{key}: expected an integer")
        elif isinstance(default, float):
            if not isinstance(value, (int, float)) or isinstance(value, bool):
                raise ConfigError(f"{path}.{key}: expected a number")
            value = float(value)
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{path}.{key}: expected a string")
        out[key] = value
    return cls(**out)


def config_from_dict(raw: dict, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: expected a mapping at the top level")
    raw = dict(raw)
    for key in raw:
        if key not in {f.name for f in fields(RunConfig)}:
            raise ConfigError(f"{key}: unknown field")
    task = raw.get("task", "classification")
    s_raw = dict(raw.get("search") or {})
    preset_name = s_raw.pop("preset", "desk-class" if task == "classification" else "desk-seg")
    if preset_name not in PRESETS:
        raise ConfigError(f"search.preset: unknown preset {preset_name!r}")
    base = PRESETS[preset_name]
    for key in s_raw:
        if key not in SearchConfig.__dataclass_fields__:
            raise ConfigError(f"search.{key}: unknown field")
    try:
        search = SearchConfig.from_dict({**asdict(base), **s_raw})
    except TypeError as exc:
        raise ConfigError(f"search: {exc}") from exc
    run_seed = raw.get("seed", 0) if seed is None else seed
    if not isinstance(run_seed, int):
        raise ConfigError("seed: expected an integer")
    search = replace(search, seed=run_seed)
    out = output_dir or os.environ.get(OUT_ENV) or raw.get("output_dir", "runs/default")
    cfg = RunConfig(
        task=task,
        seed=run_seed,
        output_dir=str(out),
        data=_build(DataConfig, raw.get("data"), "data"),
        search=search,
        train=_build(TrainSection, raw.get("train"), "train"),
        aggregation=_build(AggregationSection, raw.get("aggregation"), "aggregation"),
        eval=_build(EvalSection, raw.get("eval"), "eval"),
    )
    return cfg.validate()


def load_config(path=None, seed: Optional[int] = None, output_dir: Optional[str] = None) -> RunConfig:
    if path is None:
        return config_from_dict({}, seed, output_dir)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        from .errors import ArtifactError

        raise ArtifactError(f"cannot read config {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text) if str(path).endswith((".yaml", ".yml")) else json.loads(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"config: cannot parse {path}: {exc}") from exc
    return config_from_dict(raw or {}, seed, output_dir)


def default_config(task: str = "classification", **overrides) -> RunConfig:
    raw = {"task": task}
    if task == "segmentation":
        raw["aggregation"] = {"mode": "aspp"}
        raw["train"] = {"cells": 3, "batch_size": 8}
    else:
        raw["aggregation"] = {"mode": "dense"}
    for k, v in overrides.items():
        raw[k] = {**raw.get(k, {}), **v} if isinstance(v, dict) else v
    return config_from_dict(raw)
