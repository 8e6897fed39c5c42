"""Run configuration: one JSON document with model, training, decode, data
and path sections.  Unknown keys are rejected."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .dataio import ToyTaskSpec
from .training import TrainConfig
from .transducer import TransducerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DecodeConfig:
    mode: str = "greedy"
    beam_width: int = 16

    def __post_init__(self):
        if self.mode not in ("greedy", "beam"):
            raise ConfigError(f"decode mode must be greedy or beam, got {self.mode!r}")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    model: TransducerConfig = field(default_factory=TransducerConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    data: ToyTaskSpec = field(default_factory=ToyTaskSpec)
    paths: dict = field(default_factory=dict)
    dtype: str = "float64"

    def to_dict(self) -> dict:
        return {"model": asdict(self.model), "training": asdict(self.training),
                "decode": asdict(self.decode), "data": asdict(self.data),
                "paths": dict(self.paths), "dtype": self.dtype}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


_SECTIONS = {"model": TransducerConfig, "training": TrainConfig, "decode": DecodeConfig,
             "data": ToyTaskSpec}
_PATH_KEYS = {"train", "eval", "out", "checkpoint"}


def _build(cls, section: str, values: Mapping[str, Any]):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}]: {exc}") from None


def from_dict(data: Mapping[str, Any]) -> RunConfig:
    unknown = set(data) - set(_SECTIONS) - {"paths", "dtype"}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    kwargs = {name: _build(cls, name, data.get(name, {})) for name, cls in _SECTIONS.items()}
    paths = dict(data.get("paths", {}))
    if set(paths) - _PATH_KEYS:
        raise ConfigError(f"unknown keys in [paths]: {sorted(set(paths) - _PATH_KEYS)}")
    dtype = data.get("dtype", "float64")
    if dtype not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, got {dtype!r}")
    return RunConfig(paths=paths, dtype=dtype, **kwargs)


def load(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data)


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply ``section.key=value`` strings; values are parsed as JSON when possible."""
    data = config.to_dict()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        section, _, name = key.partition(".")
        if not name:
            if section not in ("dtype",):
                raise ConfigError(f"override key {key!r} needs a section prefix")
            data[section] = _coerce(value)
            continue
        if section not in data or not isinstance(data[section], dict):
            raise ConfigError(f"unknown config section {section!r}")
        data[section][name] = _coerce(value)
    return from_dict(data)


def toy_config() -> RunConfig:
    """Desk-scale defaults: 2x64 bidirectional sSNU-o R encoder, 1x64 sSNU-a R
    prediction network on the 8-symbol toy task."""
    model = TransducerConfig(input_size=16, vocab_size=8, encoder_type="sSNU-o R",
                             encoder_layers=2, encoder_units=64, prediction_type="sSNU-a R",
                             prediction_units=64, embedding_dim=10, joint_dim=64)
    return RunConfig(model=model, training=TrainConfig(), data=ToyTaskSpec())


def with_model(config: RunConfig, **changes) -> RunConfig:
    return replace(config, model=replace(config.model, **changes))
