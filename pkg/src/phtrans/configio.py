"""YAML configuration files with strict key checking.

A config file holds a ``model`` section mirroring ModelConfig field names
and an optional ``train`` section mirroring TrainConfig (with nested
``data`` and ``loss`` sections). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Optional

import yaml

from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .train import DataSpec, TrainConfig

_TUPLE_FIELDS = {"heads", "window", "patch_size"}


def _build_dataclass(cls, section: dict, where: str, nested=None):
    nested = nested or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(section) - set(fields)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = {
        name
        for name, f in fields.items()
        if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING
    } - set(section)
    if missing:
        raise ConfigError(f"{where}: missing required keys {sorted(missing)}")
    kwargs = {}
    for key, value in section.items():
        if key in nested:
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.{key}: expected a mapping")
            kwargs[key] = nested[key](value)
        elif key == "strides":
            kwargs[key] = tuple(tuple(int(c) for c in s) for s in value)
        elif key in _TUPLE_FIELDS and value is not None:
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def model_config_from_dict(section: dict) -> ModelConfig:
    return _build_dataclass(ModelConfig, section, "model")


def train_config_from_dict(section: dict) -> TrainConfig:
    return _build_dataclass(
        TrainConfig,
        section,
        "train",
        nested={
            "data": lambda d: _build_dataclass(DataSpec, d, "train.data"),
            "loss": lambda d: _build_dataclass(
                LossConfig,
                {**d, **({"ds_weights": tuple(d["ds_weights"])} if d.get("ds_weights") else {})},
                "train.loss",
            ),
        },
    )


def load_config_file(path) -> tuple[ModelConfig, Optional[TrainConfig]]:
    raw = yaml.safe_load(Path(path).read_text())
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    unknown = set(raw) - {"model", "train"}
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}")
    if "model" not in raw:
        raise ConfigError(f"{path}: missing 'model' section")
    model_cfg = model_config_from_dict(raw["model"])
    train_cfg = train_config_from_dict(raw["train"]) if "train" in raw else None
    return model_cfg, train_cfg


def dump_model_config(cfg: ModelConfig) -> str:
    d = dataclasses.asdict(cfg)
    d["strides"] = [list(s) for s in d["strides"]]
    for key in _TUPLE_FIELDS:
        d[key] = list(d[key])
    return yaml.safe_dump({"model": d}, sort_keys=False)
