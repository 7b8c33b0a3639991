"""Run configuration: a tree of module configs loaded from TOML plus overrides."""

from __future__ import annotations

import dataclasses
import sys
import typing
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .errors import ConfigError, ContractError
from .pooling import PoolConfig
from .scene import GridSpec
from .seq2seq import ModelConfig
from .sscn import SSCNConfig
from .synth import SynthSpec


@dataclass(frozen=True)
class OptimConfig:
    optimizer: str = "rmsprop"
    lr: float = 0.003
    epochs: int = 20
    windows_per_batch: int = 1
    window_stride: int = 1


@dataclass(frozen=True)
class SSCNTrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.002
    epochs: int = 10
    batch_size: int = 32


@dataclass(frozen=True)
class PathsConfig:
    scenes: tuple[str, ...] = ()
    maps: str = ""
    checkpoint: str = ""
    sscn_checkpoint: str = ""
    out: str = "out"


@dataclass(frozen=True)
class RunConfig:
    grid: GridSpec = field(default_factory=lambda: GridSpec(20))
    pool: PoolConfig = field(default_factory=PoolConfig)
    sscn: SSCNConfig = field(default_factory=SSCNConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    optim: OptimConfig = field(default_factory=OptimConfig)
    sscn_train: SSCNTrainConfig = field(default_factory=SSCNTrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int | None = None
    subsample: int = 10
    point: str = "sample"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value, hint, key: str):
    """Check ``value`` against a field type, converting lists to tuples."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"expected a list for {key}", key)
        item = args[0] if args else object
        return tuple(_coerce(v, item, key) for v in value)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false for {key}, got {value!r}", key)
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer for {key}, got {value!r}", key)
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number for {key}, got {value!r}", key)
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string for {key}, got {value!r}", key)
        return value
    return value


def _build(cls, data: Mapping, prefix: str):
    if not isinstance(data, Mapping):
        raise ConfigError(f"expected a table for {prefix or 'root'}", prefix)
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        path = f"{prefix}.{key}" if prefix else key
        if key not in names:
            raise ConfigError("unknown config key", path)
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, path)
        else:
            kwargs[key] = _coerce(value, hint, path)
    try:
        return cls(**kwargs)
    except (ContractError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix or 'config'}: {exc}", prefix) from exc


def _merge(base: dict, extra: Mapping) -> dict:
    out = dict(base)
    for k, v in extra.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _nest(overrides: Mapping[str, object]) -> dict:
    """Turn ``{"optim.lr": 0.1}`` into ``{"optim": {"lr": 0.1}}``."""
    out: dict = {}
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return out


def load_config(path=None, overrides: Mapping[str, object] | None = None) -> RunConfig:
    """Read a TOML file (optional) and apply dotted-key overrides on top.

    Unknown keys and ill-typed values raise :class:`ConfigError` naming the key
    path.  The ``pool`` table, when given, is also used for ``model.pool``.
    """
    data: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}", "config")
        try:
            data = tomllib.loads(p.read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}", "config") from exc
    data = _merge(data, _nest(overrides or {}))
    pool = data.get("pool")
    if isinstance(pool, Mapping):
        model = dict(data.get("model") or {})
        model["pool"] = _merge(dict(pool), model.get("pool") or {})
        data["model"] = model
    cfg = _build(RunConfig, data, "")
    if cfg.subsample < 1:
        raise ConfigError("subsample must be >= 1", "subsample")
    if cfg.point not in ("sample", "mean"):
        raise ConfigError("point must be 'sample' or 'mean'", "point")
    if cfg.optim.optimizer not in ("rmsprop", "sgd"):
        raise ConfigError("optim.optimizer must be rmsprop or sgd", "optim.optimizer")
    if cfg.sscn_train.optimizer not in ("rmsprop", "sgd"):
        raise ConfigError("sscn_train.optimizer must be rmsprop or sgd", "sscn_train.optimizer")
    return dataclasses.replace(cfg, pool=cfg.model.pool)
