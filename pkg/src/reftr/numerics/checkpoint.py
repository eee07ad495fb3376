"""Checkpoint files.

Layout, all little-endian::

    uint64   header_len
    bytes    header (UTF-8 JSON): {"tensors": [{"name", "shape", "offset"}], "metadata": {...}}
    bytes    float32 payload; each tensor starts at data_start + offset
"""
from __future__ import annotations

import json
import os
import struct
from typing import Any

import numpy as np

_F32 = np.dtype("<f4")


def save_checkpoint(path: str | os.PathLike, arrays: dict[str, np.ndarray],
                    metadata: dict[str, Any] | None = None) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype=_F32)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "metadata": metadata or {}}, sort_keys=True).encode()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + hlen].decode())
    start = 8 + hlen
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo = start + e["offset"]
        if lo + 4 * n > len(raw):
            raise ValueError(f"{path}: tensor {e['name']} runs past end of file")
        arrays[e["name"]] = np.frombuffer(raw, dtype=_F32, count=n, offset=lo).reshape(e["shape"]).astype(np.float32)
    return arrays, header.get("metadata", {})
