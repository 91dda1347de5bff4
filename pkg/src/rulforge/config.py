"""``key = value`` run configuration files.

Keys are ``section.field`` with section one of ``prep``, ``denoise``,
``model`` or ``train`` and field a field name of the matching config class.
A bare field name is accepted when exactly one section defines it. Blank
lines and ``#`` comments are ignored. Example::

    # shorter runs
    train.epochs = 3
    delta = 5
    model.activation = gelu
    train.betas = 0.9, 0.99
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .preprocess import DenoiseConfig, PrepConfig
from .training import TrainConfig

SECTIONS = {"prep": PrepConfig, "denoise": DenoiseConfig, "model": ModelConfig, "train": TrainConfig}


@dataclass(frozen=True)
class RunConfig:
    prep: PrepConfig = field(default_factory=PrepConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def snapshot(self) -> dict:
        out = {"prep": dataclasses.asdict(self.prep), "model": dataclasses.asdict(self.model),
               "train": dataclasses.asdict(self.train)}
        out["denoise"] = out["prep"].pop("denoise")
        out["train"]["betas"] = list(out["train"]["betas"])
        return out


def _fields(cls) -> dict:
    return {f.name: f for f in dataclasses.fields(cls) if f.name != "denoise"}


def resolve_key(key: str) -> tuple[str, str]:
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {key!r}: section must be one of {sorted(SECTIONS)}")
        if name not in _fields(SECTIONS[section]):
            raise ConfigError(f"unknown config key {key!r}")
        return section, name
    owners = [s for s, cls in SECTIONS.items() if key in _fields(cls)]
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous config key {key!r}; write one of "
                          + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


def _convert(key: str, default, text: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false", "1", "0"):
                raise ValueError(text)
            return text.lower() in ("true", "1")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.split(","))
        if default is None:
            return None if text.lower() in ("none", "") else float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for config key {key!r}") from None
    return text


def parse_overrides(text: str) -> dict[str, dict[str, object]]:
    """Parse config text into ``{section: {field: value}}``."""
    out: dict[str, dict[str, object]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        section, name = resolve_key(key)
        default = getattr(SECTIONS[section](), name)
        out.setdefault(section, {})[name] = _convert(key, default, value)
    return out


def build_config(overrides: dict | None = None, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    overrides = overrides or {}
    try:
        denoise = replace(base.prep.denoise, **overrides.get("denoise", {}))
        prep = replace(base.prep, denoise=denoise, **overrides.get("prep", {}))
        model = replace(base.model, **overrides.get("model", {}))
        train = replace(base.train, **overrides.get("train", {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(prep, model, train)


def load_config(path=None, extra: dict | None = None) -> RunConfig:
    overrides = parse_overrides(Path(path).read_text(encoding="utf-8")) if path else {}
    for section, values in (extra or {}).items():
        overrides.setdefault(section, {}).update(values)
    return build_config(overrides)
