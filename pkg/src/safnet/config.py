"""JSON run configuration with strict validation and ``section.key=value`` overrides.

Example file::

    {"model": {"variant": "safnet-s", "half_res_io": true},
     "train": {"epochs": 50, "batch": 1, "out_dir": "runs/s"}}
"""
from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path

from .model import ModelConfig
from .trainer import ConfigError, TrainConfig

SECTIONS = {"model": ModelConfig, "train": TrainConfig}


def _coerce(value, annotation, key):
    origin = typing.get_origin(annotation) or annotation
    try:
        if origin is bool:
            if isinstance(value, str):
                low = value.lower()
                if low in ("1", "true", "on", "yes"):
                    return True
                if low in ("0", "false", "off", "no"):
                    return False
                raise ValueError(value)
            if not isinstance(value, bool):
                raise ValueError(value)
            return value
        if origin is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        if origin is float:
            if isinstance(value, bool):
                raise ValueError(value)
            return float(value)
        if origin is str:
            if not isinstance(value, str):
                raise ValueError(value)
            return value
        if origin in (list, tuple):
            if isinstance(value, str):
                value = [v for v in value.split(",") if v]
            if not isinstance(value, (list, tuple)):
                raise ValueError(value)
            if origin is tuple:
                return tuple(int(v) for v in value)
            return list(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {value!r} for {key}") from exc
    return value


def _build(cls, values: dict, section: str):
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - fields)
    if unknown:
        raise ConfigError(f"unknown {section} keys: {', '.join(unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{section}.{k}") for k, v in values.items()}
    try:
        if cls is ModelConfig and "variant" in kwargs:
            return ModelConfig.for_variant(kwargs.pop("variant"), **kwargs)
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} config: {exc}") from exc


def parse_overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override {pair!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=None, model_defaults=None):
    """Return ``(ModelConfig, TrainConfig)`` from a JSON file plus overrides.

    Override values win over file values, which win over ``model_defaults``.
    """
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        unknown = sorted(set(raw) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"unknown config sections: {', '.join(unknown)}")
    merged = {"model": dict(model_defaults or {}), "train": {}}
    for section in SECTIONS:
        part = raw.get(section, {})
        if not isinstance(part, dict):
            raise ConfigError(f"config section {section!r} must be an object")
        merged[section].update(part)
    for section, values in parse_overrides(overrides).items():
        merged[section].update(values)
    return _build(ModelConfig, merged["model"], "model"), _build(TrainConfig, merged["train"], "train")
