"""Run configuration: one JSON document with data/model/train/cache/serve sections."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

from .data import ConfigError, SyntheticConfig
from .model import ModelConfig
from .train import TrainConfig


@dataclass
class CacheConfig:
    path: Optional[str] = None


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8080


SECTIONS = {"data": SyntheticConfig, "model": ModelConfig, "train": TrainConfig,
            "cache": CacheConfig, "serve": ServeConfig}


def _coerce(path: str, default, value):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if isinstance(default, tuple):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(path, f"expected a list of integers, got {value!r}")
        return tuple(value)
    if isinstance(default, str) or default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    return value


def build_section(name: str, values: dict):
    cls = SECTIONS[name]
    if not isinstance(values, dict):
        raise ConfigError(name, "section must be a JSON object")
    base = cls()
    known = {f.name for f in fields(cls)}
    kw = {}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"{name}.{key}", "unknown key")
        kw[key] = _coerce(f"{name}.{key}", getattr(base, key), value)
    return cls(**kw)


@dataclass
class RunConfig:
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    cache: CacheConfig = field(default_factory=CacheConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("$", "config must be a JSON object")
        for key in doc:
            if key not in SECTIONS:
                raise ConfigError(key, "unknown section")
        cfg = cls(**{name: build_section(name, doc[name]) for name in SECTIONS if name in doc})
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError("$", f"invalid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def validate(self) -> "RunConfig":
        self.data.validate()
        # the model's input extents follow the data
        self.model.image_size = tuple(self.data.image_size)
        self.model.n_categories = self.data.n_categories
        self.model.n_context = self.data.n_context
        if self.data.behavior_max > self.model.max_behaviors:
            raise ConfigError("data.behavior_max", "exceeds model.max_behaviors (truncation limit)")
        self.model.validate()
        self.train.validate()
        return self

    def with_seed(self, seed: int) -> "RunConfig":
        self.data.seed = seed
        self.train.seed = seed
        return self
