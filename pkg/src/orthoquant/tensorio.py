"""Self-describing binary tensor dumps and key = value sidecars.

Layout (all little-endian)::

    b"VQ3T"  u16 version  u8 dtype  u8 rank  u32 dims[rank]  payload

dtype tags: 0 = float64, 1 = bf16 (uint16 patterns), 2 = int8.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"VQ3T"
VERSION = 1

_TAGS = {0: np.dtype("<f8"), 1: np.dtype("<u2"), 2: np.dtype("i1")}
_KINDS = {"f64": 0, "bf16": 1, "i8": 2}


def _tag_for(arr: np.ndarray, dtype: str | None) -> int:
    if dtype is not None:
        if dtype not in _KINDS:
            raise ValueError(f"unknown dump dtype {dtype!r}")
        return _KINDS[dtype]
    if arr.dtype == np.float64:
        return 0
    if arr.dtype == np.uint16:
        return 1
    if arr.dtype == np.int8:
        return 2
    raise TypeError(f"cannot infer dump dtype for {arr.dtype}; pass dtype=")


def dumps_tensor(arr, dtype: str | None = None) -> bytes:
    arr = np.asarray(arr)
    tag = _tag_for(arr, dtype)
    if arr.ndim > 255:
        raise ValueError("rank too large")
    header = MAGIC + struct.pack("<HBB", VERSION, tag, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_TAGS[tag]).tobytes()
    return header + payload


def loads_tensor(blob: bytes) -> np.ndarray:
    if blob[:4] != MAGIC:
        raise ValueError("not a tensor dump (bad magic)")
    version, tag, rank = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise ValueError(f"unsupported dump version {version}")
    if tag not in _TAGS:
        raise ValueError(f"unknown dtype tag {tag}")
    dims = struct.unpack_from(f"<{rank}I", blob, 8)
    offset = 8 + 4 * rank
    dt = _TAGS[tag]
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(blob) - offset != count * dt.itemsize:
        raise ValueError("payload size does not match header dims")
    data = np.frombuffer(blob, dtype=dt, count=count, offset=offset)
    return data.reshape(dims).astype(dt.newbyteorder("="))


def save_tensor(path: str | os.PathLike, arr, dtype: str | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_tensor(arr, dtype))


def load_tensor(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_tensor(fh.read())


def write_kv(path: str | os.PathLike, record: dict) -> None:
    """Write a flat ``key = value`` text record with keys sorted."""
    lines = [f"{k} = {record[k]}" for k in sorted(record)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    out: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out
