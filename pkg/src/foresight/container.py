"""Versioned binary container for named arrays.

Layout (all integers little-endian)::

    offset 0   magic      b"FSCT"
    offset 4   version    uint16  (currently 1)
    offset 6   reserved   uint16  (0)
    offset 8   header_len uint64  (bytes of JSON header, padded with spaces to 8)
    offset 16  header     UTF-8 JSON
    ...        payload    concatenated raw arrays

The header is ``{"format": 1, "kind": str, "meta": {...}, "entries": [...]}``.
Each entry has ``name``, ``shape``, ``dtype`` (``"<f8"`` or ``"|u1"``),
``offset`` and ``nbytes`` relative to the payload start, plus any extra fields
(``prunable`` for parameter sets). Float payloads are IEEE-754 binary64.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"FSCT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<4sHHQ")
_DTYPES = {"<f8": np.dtype("<f8"), "|u1": np.dtype("|u1"), "<i8": np.dtype("<i8")}


class ContainerError(ValueError):
    pass


def write_container(path, kind: str, entries: list[dict[str, Any]], meta: dict | None = None) -> Path:
    """Write ``entries`` (dicts with ``name``, ``array`` and optional extra keys)."""
    path = Path(path)
    header_entries = []
    blobs = []
    offset = 0
    for entry in entries:
        arr = np.asarray(entry["array"])
        dtype = entry.get("dtype", "<f8")
        if dtype not in _DTYPES:
            raise ContainerError(f"unsupported dtype {dtype!r}")
        blob = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        info = {k: v for k, v in entry.items() if k not in ("array", "dtype")}
        info.update(shape=list(arr.shape), dtype=dtype, offset=offset, nbytes=len(blob))
        header_entries.append(info)
        blobs.append(blob)
        offset += len(blob)
    header = {"format": FORMAT_VERSION, "kind": kind, "meta": meta or {}, "entries": header_entries}
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, 0, len(raw)))
        f.write(raw)
        for blob in blobs:
            f.write(blob)
    return path


def read_container(path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, arrays)``; ``arrays`` preserves entry order."""
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size:
        raise ContainerError(f"{path}: file too short for a container header")
    magic, version, _, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    start = _PREFIX.size + hlen
    if len(data) < start:
        raise ContainerError(f"{path}: truncated header")
    header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    if kind is not None and header.get("kind") != kind:
        raise ContainerError(f"{path}: expected a {kind!r} container, found {header.get('kind')!r}")
    arrays = {}
    for e in header["entries"]:
        lo = start + e["offset"]
        hi = lo + e["nbytes"]
        if hi > len(data):
            raise ContainerError(f"{path}: payload for {e['name']!r} is truncated")
        dt = _DTYPES[e["dtype"]]
        arrays[e["name"]] = np.frombuffer(data[lo:hi], dtype=dt).reshape(e["shape"]).copy()
    return header, arrays
