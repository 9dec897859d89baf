"""Binary weight files.

Layout::

    b"VTGW0001"                      8-byte magic
    uint64 little-endian             header length in bytes
    UTF-8 JSON header                {"tensors": [{path, dtype, shape, offset, nbytes}...], "meta": {...}}
    raw little-endian buffers        row-major, offsets relative to the end of the header

Arrays come back bit-identical to what was written.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"VTGW0001"


class WeightFileError(ValueError):
    pass


def save_weights(path: str | os.PathLike, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(
            {"path": name, "dtype": le.dtype.str, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)}
        )
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)
    os.replace(tmp, path)


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh)[0]


def _read_header(fh) -> tuple[dict, int]:
    magic = fh.read(8)
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r}; not a weight file")
    (length,) = struct.unpack("<Q", fh.read(8))
    try:
        header = json.loads(fh.read(length).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WeightFileError(f"corrupt weight header: {exc}") from exc
    return header, 16 + length


def load_weights(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, meta)``."""
    with open(path, "rb") as fh:
        header, start = _read_header(fh)
        payload = fh.read()
    arrays = {}
    for e in header["tensors"]:
        lo, hi = e["offset"], e["offset"] + e["nbytes"]
        if hi > len(payload):
            raise WeightFileError(f"truncated weight file at {e['path']}")
        arr = np.frombuffer(payload[lo:hi], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        arrays[e["path"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    return arrays, header.get("meta", {})
