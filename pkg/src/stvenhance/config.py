"""Run configuration: one YAML file per run, merged over documented defaults.

Merge order is defaults < file < environment < command line. Environment
overrides use the prefix ``STVENHANCE_`` with ``__`` between section and key,
e.g. ``STVENHANCE_TRAIN__LR=3e-4``. Command-line overrides are ``section.key=value``
strings. Values from the environment and the command line are parsed as YAML
scalars, so ``1e-3``, ``true`` and ``[1, 2, 4]`` all work.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .autoencoder import AutoencoderConfig
from .backbone import MICRO_CONFIG, BackboneConfig
from .trainer import TrainConfig

ENV_PREFIX = "STVENHANCE_"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_clips: int = 8
    frames: int = 9
    height: int = 32
    width: int = 32
    seed: int = 0
    corpus: str = ""  # directory written by synth-data; empty means generate in memory

    def validate(self) -> None:
        if self.n_clips < 1 or self.frames < 1:
            raise ValueError("data.n_clips and data.frames must be >= 1")


@dataclass
class EnhanceConfig:
    scale: float = 4.0
    interp: int = 0
    noise_level: int = 0
    cfg: float = 7.5
    steps: int = 50
    seed: int = 0
    prompt: str = ""  # empty uses the clip caption

    def validate(self) -> None:
        if self.scale < 1:
            raise ValueError(f"enhance.scale must be >= 1, got {self.scale}")
        if not 0 <= self.interp <= 7:
            raise ValueError(f"enhance.interp must lie in 0..7, got {self.interp}")
        if not 0 <= self.noise_level <= 300:
            raise ValueError(f"enhance.noise_level must lie in [0, 300], got {self.noise_level}")
        if self.cfg < 0 or self.steps < 1:
            raise ValueError("enhance.cfg must be >= 0 and enhance.steps >= 1")


# micro-scale defaults used by the overfit gate
MICRO_AUTOENCODER = AutoencoderConfig(factor=1)
MICRO_MODEL = MICRO_CONFIG


def _pretrain_defaults() -> TrainConfig:
    return TrainConfig(steps=300, lr=1e-3, checkpoint_every=0)


def _train_defaults() -> TrainConfig:
    return TrainConfig(steps=2000, lr=1e-3)


@dataclass
class RunConfig:
    name: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    autoencoder: AutoencoderConfig = field(default_factory=lambda: MICRO_AUTOENCODER)
    model: BackboneConfig = field(default_factory=lambda: MICRO_MODEL)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    train: TrainConfig = field(default_factory=_train_defaults)
    enhance: EnhanceConfig = field(default_factory=EnhanceConfig)
    provenance: dict = field(default_factory=dict, repr=False, compare=False)

    def validate(self) -> None:
        for section in SECTIONS:
            try:
                getattr(self, section).validate()
            except ValueError as exc:
                raise ConfigError(f"[{section}] {exc}") from None
        if self.model.in_channels != self.autoencoder.channels:
            raise ConfigError(f"model.in_channels={self.model.in_channels} but the autoencoder produces "
                              f"{self.autoencoder.channels} channels")
        f = self.autoencoder.factor
        if self.data.height % f or self.data.width % f:
            raise ConfigError(f"data size {self.data.height}x{self.data.width} not divisible by factor {f}")
        if self.data.frames > self.model.max_frames:
            raise ConfigError(f"data.frames={self.data.frames} exceeds model.max_frames={self.model.max_frames}")

    def to_dict(self) -> dict:
        out = {"name": self.name}
        for section in SECTIONS:
            d = dataclasses.asdict(getattr(self, section))
            out[section] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False), encoding="utf-8")
        return path


SECTIONS = ("data", "autoencoder", "model", "pretrain", "train", "enhance")


def _number(value):
    # YAML 1.1 reads "1e-3" as a string
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    return value


def _coerce(value, typ, where: str):
    if typ in (int, float):
        value = _number(value)
    if typ is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    if typ is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise ConfigError(f"{where}: expected an integer, got {value!r}")
    if typ is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if typ is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{where}: expected a string, got {value!r}")
    if typ is tuple:
        if isinstance(value, (list, tuple)) and all(isinstance(v, (int, float)) for v in value):
            return tuple(value)
        raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
    raise ConfigError(f"{where}: unsupported field type {typ}")


def _apply(cfg: RunConfig, key: str, value, source: str) -> RunConfig:
    parts = key.split(".")
    if parts == ["name"]:
        cfg.name = _coerce(value, str, "name")
        cfg.provenance["name"] = source
        return cfg
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {key!r} (from {source})")
    section, name = parts
    obj = getattr(cfg, section)
    hints = typing.get_type_hints(type(obj))
    if name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r} (from {source})")
    setattr(cfg, section, dataclasses.replace(obj, **{name: _coerce(value, hints[name], key)}))
    cfg.provenance[key] = source
    return cfg


def _flatten(d: dict, source: str) -> list[tuple[str, object]]:
    if not isinstance(d, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    items = []
    for k, v in d.items():
        if isinstance(v, dict):
            items += [(f"{k}.{kk}", vv) for kk, vv in v.items()]
        else:
            items.append((k, v))
    return items


def env_overrides(environ=None) -> list[tuple[str, object]]:
    environ = os.environ if environ is None else environ
    out = []
    for var, raw in sorted(environ.items()):
        if not var.startswith(ENV_PREFIX):
            continue
        key = var[len(ENV_PREFIX):].lower().replace("__", ".")
        out.append((key, yaml.safe_load(raw)))
    return out


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form section.key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(paths=(), overrides=(), environ=None) -> RunConfig:
    """Merge defaults, YAML files (in order), environment and CLI overrides, then validate."""
    cfg = RunConfig()
    for key in ["name"] + [f"{s}.{f.name}" for s in SECTIONS for f in dataclasses.fields(getattr(cfg, s))]:
        cfg.provenance[key] = "default"
    for path in [paths] if isinstance(paths, (str, Path)) else paths:
        text = Path(path).read_text(encoding="utf-8")
        for key, value in _flatten(yaml.safe_load(text) or {}, str(path)):
            _apply(cfg, key, value, f"file:{path}")
    for key, value in env_overrides(environ):
        _apply(cfg, key, value, "env")
    for item in overrides:
        key, value = parse_override(item) if isinstance(item, str) else item
        _apply(cfg, key, value, "cli")
    cfg.validate()
    return cfg
