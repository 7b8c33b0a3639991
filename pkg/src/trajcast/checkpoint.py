"""Named-tensor checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic  b"TRJCKPT\\0"
    4 bytes   uint32 format version
    8 bytes   uint64 manifest length N
    N bytes   UTF-8 JSON manifest
    ...       tensor payload, float64 little-endian, concatenated

The manifest holds ``version``, ``kind``, an optional ``config`` block and a
``tensors`` list of ``{"name", "shape", "offset"}`` with byte offsets relative
to the start of the payload.  JSON is written with sorted keys so identical
inputs produce identical bytes.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping
from pathlib import Path
from typing import Any

import numpy as np

from .errors import DataError

MAGIC = b"TRJCKPT\0"
VERSION = 1


def dumps(tensors: Mapping[str, np.ndarray], kind: str, config: Mapping[str, Any] | None = None) -> bytes:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(np.asarray(tensors[name], dtype="<f8"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        raw = arr.tobytes(order="C")
        chunks.append(raw)
        offset += len(raw)
    manifest = {"version": VERSION, "kind": kind, "config": dict(config or {}), "tensors": entries}
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<IQ", VERSION, len(head)) + head + b"".join(chunks)


def loads(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Return ``(tensors, manifest)``."""
    if blob[:8] != MAGIC:
        raise DataError("not a trajcast checkpoint (bad magic)")
    version, n = struct.unpack("<IQ", blob[8:20])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    manifest = json.loads(blob[20 : 20 + n].decode("utf-8"))
    payload = memoryview(blob)[20 + n :]
    tensors = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64)) if e["shape"] else 1
        start = e["offset"]
        stop = start + 8 * count
        if stop > len(payload):
            raise DataError(f"checkpoint truncated while reading {e['name']!r}")
        arr = np.frombuffer(payload[start:stop], dtype="<f8").astype(np.float64)
        tensors[e["name"]] = arr.reshape(e["shape"])
    return tensors, manifest


def save(path, tensors: Mapping[str, np.ndarray], kind: str, config=None) -> None:
    Path(path).write_bytes(dumps(tensors, kind, config))


def load(path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return loads(Path(path).read_bytes())
