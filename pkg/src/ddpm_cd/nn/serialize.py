"""Binary checkpoint container.

Layout::

    b"DDPMCD1\\0"                      8-byte magic
    <uint64 little-endian>            header length in bytes
    <UTF-8 JSON header>               {"tensors": [{"name", "shape", "dtype"}...], "metadata": {...}}
    <raw little-endian float32>       one buffer per tensor, in header order

Writing then reading gives back bit-identical arrays.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from ..errors import DataError

MAGIC = b"DDPMCD1\0"
_DTYPE = "<f4"


def save_tensors(path, tensors: dict, metadata: dict | None = None) -> None:
    names = list(tensors)
    arrays = [np.ascontiguousarray(np.asarray(tensors[n]), dtype=_DTYPE) for n in names]
    header = {
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "float32"} for n, a in zip(names, arrays)],
        "metadata": metadata or {},
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(a.tobytes())
    os.replace(tmp, path)


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
    return header


def _read_header(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic {magic!r})")
    raw = fh.read(8)
    if len(raw) != 8:
        raise DataError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", raw)
    blob = fh.read(n)
    if len(blob) != n:
        raise DataError(f"{path}: truncated header")
    try:
        header = json.loads(blob.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: corrupt header: {exc}") from None
    return header, len(MAGIC) + 8 + n


def load_tensors(path) -> tuple[dict, dict]:
    """Return ``(tensors, metadata)``; tensors keep header order."""
    with open(path, "rb") as fh:
        header, _ = _read_header(fh, path)
        out = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            if entry.get("dtype", "float32") != "float32":
                raise DataError(f"{path}: unsupported dtype {entry['dtype']!r} for {entry['name']}")
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(4 * count)
            if len(buf) != 4 * count:
                raise DataError(f"{path}: truncated data for tensor {entry['name']!r}")
            out[entry["name"]] = np.frombuffer(buf, dtype=_DTYPE).reshape(shape).astype(np.float32)
        if fh.read(1):
            raise DataError(f"{path}: trailing bytes after last tensor")
    return out, header.get("metadata", {})
