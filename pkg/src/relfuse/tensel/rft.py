"""RFT1 binary tensor files.

Layout: magic ``RFT1``, one dtype byte (0 = float32, 1 = float64), four
little-endian uint32 dims (N, C, H, W), then the row-major little-endian
payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"RFT1"
_HEADER = struct.Struct("<4sB4I")
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class RFTFormatError(ValueError):
    pass


def dumps(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.ndim != 4:
        raise RFTFormatError(f"RFT1 stores rank-4 arrays, got shape {arr.shape}")
    try:
        code = _CODES[arr.dtype]
    except KeyError:
        raise RFTFormatError(f"unsupported dtype {arr.dtype}") from None
    header = _HEADER.pack(MAGIC, code, *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def loads(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise RFTFormatError("truncated header")
    magic, code, *dims = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise RFTFormatError(f"bad magic {magic!r}")
    if code not in _DTYPES:
        raise RFTFormatError(f"unknown dtype code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(dims))
    payload = buf[_HEADER.size:]
    if len(payload) != count * dt.itemsize:
        raise RFTFormatError(f"payload is {len(payload)} bytes, expected {count * dt.itemsize}")
    return np.frombuffer(payload, dtype=dt).astype(dt.newbyteorder("="), copy=True).reshape(dims)


def save(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(dumps(arr))


def load(path) -> np.ndarray:
    path = Path(path)
    try:
        return loads(path.read_bytes())
    except RFTFormatError as exc:
        raise RFTFormatError(f"{path}: {exc}") from None
