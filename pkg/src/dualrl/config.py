"""INI config files for training runs.

Sections map onto the nested dataclasses of :class:`TrainConfig`::

    [train]     algorithm, scale, steps, rollout_batch, G_O, G_S, ...
    [env]       K, C, S
    [reward]    lam, leakage_enabled
    [optim]     eps_low, eps_high, beta, learning_rate, ...
    [features]  observer_max_len, solver_max_len, scene_cross, ...
    [init]      format_prior, perception_prior, reading_prior, noise, seed

``[train] algorithm`` and ``scale`` choose the preset the remaining keys
override. ``--set section.key=value`` on the command line overrides a file.
"""

from __future__ import annotations

import configparser
import dataclasses
import enum
import io
import typing
from pathlib import Path
from typing import Iterable

from .optimize import OptimConfig
from .policy import FeatureConfig, InitConfig
from .reward import RewardConfig
from .synthenv import ConfigError, EnvConfig
from .trainer import TrainConfig, preset

SECTIONS: dict[str, type] = {
    "env": EnvConfig,
    "reward": RewardConfig,
    "optim": OptimConfig,
    "features": FeatureConfig,
    "init": InitConfig,
}
NESTED = set(SECTIONS)


def _coerce(raw: str, tp, where: str):
    """Parse ``raw`` as type ``tp`` (bool, int, float, str, enum or tuple of floats)."""
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], where)
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if origin is tuple:
        try:
            return tuple(float(x) for x in raw.split(","))
        except ValueError as e:
            raise ConfigError(f"{where}: {e}") from e
    try:
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        if isinstance(tp, type) and issubclass(tp, enum.Enum):
            return tp(raw)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e
    return raw


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


def _build(cls, values: dict[str, str], where: str, base=None):
    hints = _hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    kw = {}
    for k, raw in values.items():
        if k not in known:
            raise ConfigError(f"[{where}] unknown key {k!r}")
        kw[k] = _coerce(raw, hints[k], f"{where}.{k}")
    if base is not None:
        return dataclasses.replace(base, **kw)
    return cls(**kw)


def parse_overrides(pairs: Iterable[str]) -> dict[str, dict[str, str]]:
    """``["optim.learning_rate=0.1", "steps=50"]`` -> {section: {key: value}}."""
    out: dict[str, dict[str, str]] = {}
    for p in pairs:
        key, sep, val = p.partition("=")
        if not sep:
            raise ConfigError(f"override {p!r} is not key=value")
        sec, dot, name = key.strip().rpartition(".")
        out.setdefault(sec if dot else "train", {})[name] = val
    return out


def load_config(path=None, overrides: Iterable[str] = ()) -> TrainConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser()
    cp.optionxform = str  # keys such as G_O are case sensitive
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"config file not found: {path}")
        cp.read(path)
    data: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for sec, kv in parse_overrides(overrides).items():
        data.setdefault(sec, {}).update(kv)
    unknown = set(data) - NESTED - {"train"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    train = dict(data.get("train", {}))
    algorithm = train.pop("algorithm", "prco").strip()
    scale = train.pop("scale", "desk").strip()
    if scale not in ("desk", "large"):
        raise ConfigError(f"unknown scale {scale!r}")
    cfg = preset(algorithm, scale)

    nested = {}
    for sec, cls in SECTIONS.items():
        if sec in data:
            nested[sec] = _build(cls, data[sec], sec, base=getattr(cfg, sec))
    hints = _hints(TrainConfig)
    top = {}
    known = {f.name for f in dataclasses.fields(TrainConfig)} - NESTED
    for k, raw in train.items():
        if k not in known:
            raise ConfigError(f"[train] unknown key {k!r}")
        top[k] = _coerce(raw, hints[k], f"train.{k}")
    return dataclasses.replace(cfg, **nested, **top)


def _fmt(v) -> str:
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, tuple):
        return ", ".join(repr(x) for x in v)
    return str(v)


def to_ini(cfg: TrainConfig) -> str:
    """Render a config so that ``load_config`` reads it back unchanged."""
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp["train"] = {f.name: _fmt(getattr(cfg, f.name)) for f in dataclasses.fields(cfg) if f.name not in NESTED}
    for sec in SECTIONS:
        sub = getattr(cfg, sec)
        cp[sec] = {f.name: _fmt(getattr(sub, f.name)) for f in dataclasses.fields(sub)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
