"""Helpers for dictionaries of named parameter tensors."""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from . import checkpoint
from .errors import DataError
from .ndgrad import Tensor, parameter

Params = dict[str, Tensor]


def to_arrays(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: v.data.copy() for k, v in params.items()}


def from_arrays(arrays: Mapping[str, np.ndarray]) -> Params:
    return {k: parameter(v, name=k) for k, v in sorted(arrays.items())}


def zeros_like(params: Mapping[str, Tensor]) -> Params:
    return {k: parameter(np.zeros_like(v.data), name=k) for k, v in params.items()}


def check_shapes(params: Mapping[str, Tensor], expected: Mapping[str, Tensor]) -> None:
    missing = sorted(set(expected) - set(params))
    if missing:
        raise DataError(f"checkpoint is missing tensors: {', '.join(missing)}")
    for k, v in expected.items():
        if params[k].shape != v.shape:
            raise DataError(f"tensor {k!r} has shape {params[k].shape}, expected {v.shape}")


def save(path, params: Mapping[str, Tensor], kind: str, config=None) -> None:
    checkpoint.save(path, to_arrays(params), kind, config)


def load(path, kind: str | None = None) -> tuple[Params, dict]:
    arrays, manifest = checkpoint.load(path)
    if kind is not None and manifest.get("kind") != kind:
        raise DataError(f"{path}: expected a {kind!r} checkpoint, found {manifest.get('kind')!r}")
    return from_arrays(arrays), manifest
