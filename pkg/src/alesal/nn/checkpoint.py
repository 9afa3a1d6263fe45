"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"ALCK"                      magic
    u16   version                 currently 1
    u32   config_len
    bytes config                  UTF-8 JSON, sorted keys, compact separators
    u32   entry_count
    entry_count times:
        u16   name_len
        bytes name                UTF-8
        u8    dtype code          1=float32 2=float64 3=int64
        u8    ndim
        u32 * ndim  dims
        bytes data                C order, little-endian
    32 bytes SHA-256 of every preceding byte

Entries are written in sorted name order so equal inputs give equal bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"ALCK"
VERSION = 1
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CODES = {v: k for k, v in _DTYPES.items()}


class CheckpointError(ValueError):
    pass


def dumps(arrays: Dict[str, np.ndarray], config: dict) -> bytes:
    cfg = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    parts = [MAGIC, struct.pack("<HI", VERSION, len(cfg)), cfg, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        dt = arr.dtype.newbyteorder("<")
        if dt not in _CODES:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for entry {name!r}")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<BB", _CODES[dt], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    body = b"".join(parts)
    return body + hashlib.sha256(body).digest()


def loads(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(blob) < 46 or blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, cfg_len = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    config = json.loads(body[pos : pos + cfg_len].decode())
    pos += cfg_len
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + name_len].decode()
        pos += name_len
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        dims = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _DTYPES.get(code)
        if dt is None:
            raise CheckpointError(f"unknown dtype code {code} for entry {name!r}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
        arrays[name] = np.frombuffer(body, dtype=dt, count=nbytes // dt.itemsize, offset=pos).reshape(dims).copy()
        pos += nbytes
    if pos != len(body):
        raise CheckpointError("trailing bytes after checkpoint entries")
    return arrays, config


def save(path, arrays: Dict[str, np.ndarray], config: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, config))


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
