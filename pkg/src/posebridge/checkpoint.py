"""PBCK binary container for named arrays.

Layout, all integers little-endian::

    b"PBCK" | u32 version | u32 count
    per entry: u16 name_len | utf-8 name | u8 dtype (0=f32, 1=f64) | u8 rank | u32 dims[rank] | payload

Entries are written in insertion order, so equal inputs give equal bytes.
"""

from __future__ import annotations

import os
import struct
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"PBCK"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def encode(arrays: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        if arr.dtype not in _CODES:
            arr = arr.astype(np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointError(f"tensor {name!r} has too many dimensions")
        code = _CODES[arr.dtype]
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return b"".join(parts)


def decode(data: bytes) -> dict[str, np.ndarray]:
    if data[:4] != MAGIC:
        raise CheckpointError(f"not a PBCK container (magic {data[:4]!r})")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported PBCK version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + n].decode("utf-8")
            off += n
            code, rank = struct.unpack_from("<BB", data, off)
            off += 2
            if code not in _DTYPES:
                raise CheckpointError(f"tensor {name!r} has unknown dtype code {code}")
            dims = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            dt = _DTYPES[code]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
            if off + nbytes > len(data):
                raise CheckpointError(f"tensor {name!r} is truncated")
            if name in out:
                raise CheckpointError(f"duplicate tensor name {name!r}")
            out[name] = np.frombuffer(data, dtype=dt, count=nbytes // dt.itemsize, offset=off).reshape(dims).copy()
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated PBCK container: {exc}") from exc
    if off != len(data):
        raise CheckpointError("trailing bytes after the last tensor")
    return out


def save(path: str | os.PathLike, arrays: Mapping[str, np.ndarray]) -> None:
    data = encode(arrays)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return decode(fh.read())
