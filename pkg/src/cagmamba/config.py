"""Run configuration: one YAML file of flat dotted keys plus ``key=value`` overrides.

Sections map onto dataclasses::

    seed            global seed (data generation, initialization, shuffling)
    model.*         ModelConfig
    train.*         TrainConfig (its seed comes from ``seed``)
    data.*          DataSettings
    ablate.*        AblationSettings

Nested mappings are accepted and flattened, so ``model: {f: 8}`` and
``model.f: 8`` are equivalent.  Unknown keys are rejected.
"""

from __future__ import annotations

import types
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from cagmamba.ablation import AblationSettings
from cagmamba.model import ConfigError, ModelConfig
from cagmamba.training import TrainConfig


@dataclass
class DataSettings:
    path: str | None = None  # dataset file; synthetic data is generated when unset
    n: int = 500
    d_t: int = 8
    d_a: int = 8
    k_t: int = 2
    k_a: int = 1
    context_strength: float = 0.5
    context_weights: tuple[float, ...] = (1.0,)
    text_noise: float = 0.1
    audio_noise: float = 0.3


@dataclass
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)
    ablate: AblationSettings = field(default_factory=AblationSettings)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def to_flat(self) -> dict:
        out = {"seed": self.seed}
        for section in SECTIONS:
            for k, v in asdict(getattr(self, section)).items():
                if section == "train" and k == "seed":
                    continue
                out[f"{section}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out


SECTIONS = ("model", "train", "data", "ablate")
_SECTION_TYPES = {"model": ModelConfig, "train": TrainConfig, "data": DataSettings, "ablate": AblationSettings}


def _schema() -> dict[str, type]:
    schema: dict[str, object] = {"seed": int}
    for section, cls in _SECTION_TYPES.items():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            if section == "train" and f.name == "seed":
                continue
            schema[f"{section}.{f.name}"] = hints[f.name]
    return schema


SCHEMA = _schema()


def _coerce(key: str, value, tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(key, value, inner[0])
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        (elem, *_rest) = typing.get_args(tp)
        return tuple(_coerce(key, v, elem) for v in value)
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads "1e-3" (no dot) as a string
            try:
                return float(value)
            except ValueError:
                pass
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported type {tp}")


def flatten(mapping: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in mapping.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def parse_override(text: str) -> tuple[str, object]:
    """``model.f=8`` -> ("model.f", 8); the value is parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"override {text!r}: {exc}") from exc
    return key.strip(), value


def build(values: dict) -> RunConfig:
    """Apply flat ``values`` on top of defaults, validating every key."""
    unknown = sorted(set(values) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = RunConfig()
    per_section: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, raw in values.items():
        value = _coerce(key, raw, SCHEMA[key])
        if key == "seed":
            cfg.seed = value
        else:
            section, name = key.split(".", 1)
            per_section[section][name] = value
    for section, updates in per_section.items():
        setattr(cfg, section, replace(getattr(cfg, section), **updates))
    cfg.model.validate()
    try:
        cfg.train_config().validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.data.n < 1 or not 0.0 <= cfg.data.context_strength <= 1.0:
        raise ConfigError("data.n must be >= 1 and data.context_strength in [0, 1]")
    return cfg


def load_config(path: str | Path | None = None, overrides: list[str] = (), seed: int | None = None) -> RunConfig:
    values: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        values.update(flatten(loaded or {}))
    for item in overrides:
        key, value = parse_override(item)
        values[key] = value
    if seed is not None:
        values["seed"] = seed
    return build(values)
