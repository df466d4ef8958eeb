"""Flat ``section.key = value`` run configuration."""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .audio import SpecAugmentPolicy
from .encoder import EncoderConfig
from .errors import ConfigError
from .training import FinetuneConfig, PretrainConfig


@dataclass
class FeatureConfig:
    n_mels: int = 80
    refit_mvn: bool = False


@dataclass
class CrossConfig:
    scale_logits: bool = False


@dataclass
class EvalConfig:
    diag_window: int = 2


@dataclass
class RunConfig:
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    cross: CrossConfig = field(default_factory=CrossConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    specaugment: SpecAugmentPolicy = field(default_factory=SpecAugmentPolicy)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        self.encoder.validate()
        self.pretrain.validate()
        self.finetune.validate()
        self.specaugment.validate(self.features.n_mels)
        if self.encoder.n_mels != self.features.n_mels:
            raise ConfigError("encoder.n_mels must equal features.n_mels")

    def set(self, key: str, value: str) -> None:
        parts = key.strip().split(".")
        target = self
        for part in parts[:-1]:
            if not hasattr(target, part) or not dataclasses.is_dataclass(getattr(target, part)):
                raise ConfigError(f"unknown config section {part!r} in {key!r}")
            target = getattr(target, part)
        name = parts[-1]
        fields = {f.name: f for f in dataclasses.fields(target)}
        if name not in fields or dataclasses.is_dataclass(getattr(target, name)):
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(type(target))
        converted = _coerce(value.strip(), hints[name], key)
        if dataclasses.is_dataclass(target) and getattr(target.__dataclass_params__, "frozen", False):
            object.__setattr__(target, name, converted)
        else:
            setattr(target, name, converted)

    def items(self):
        for key, value in _flatten(self):
            yield key, value

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def to_dict(self) -> dict:
        return dict(self.items())


def _flatten(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            yield from _flatten(value, f"{prefix}{f.name}.")
        else:
            yield f"{prefix}{f.name}", value


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def _coerce(text: str, hint, key: str):
    args = typing.get_args(hint)
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        if text.lower() in ("none", "null", ""):
            if type(None) in args:
                return None
        hint = next(a for a in args if a is not type(None))
    try:
        if hint is bool:
            lowered = text.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {hint.__name__}") from exc
    raise ConfigError(f"{key}: unsupported type {hint}")


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    config = base or RunConfig()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        config.set(key, value)
    return config


def load_config(path=None, overrides: list[str] | None = None) -> RunConfig:
    config = RunConfig()
    if path is not None:
        config = parse_config(Path(path).read_text(), config)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        config.set(key, value)
    config.validate()
    return config


def config_from_dict(values: dict) -> RunConfig:
    config = RunConfig()
    for key, value in values.items():
        config.set(key, _format(value))
    return config
