"""Binary array files: magic "GTSB", little-endian header, float64 payload.

Layout: 4 magic bytes | u32 version | u32 dtype code | u32 ndim |
ndim x u64 shape | row-major float64 payload.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"GTSB"
VERSION = 1
DTYPE_F64 = 1


def write_array(path: str | Path, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    header = MAGIC + struct.pack("<III", VERSION, DTYPE_F64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: bad magic {raw[:4]!r}")
    version, dtype_code, ndim = struct.unpack_from("<III", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F64:
        raise ValueError(f"{path}: unsupported dtype code {dtype_code}")
    offset = 16
    shape = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
    payload = raw[offset:]
    if len(payload) != 8 * count:
        raise ValueError(
            f"{path}: payload has {len(payload)} bytes, expected {8 * count}"
        )
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
