"""KPF1 binary tensor container.

Layout: magic bytes ``4B 50 46 31`` ("KPF1"), u8 ndim, ndim little-endian u64
dims, little-endian f64 dt, then the row-major little-endian f64 payload.
Every tensor the package writes to disk goes through this format.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"KPF1"


class Kpf1FormatError(ValueError):
    """File is not a valid KPF1 container."""


def write_kpf1(path, array, dt: float = 1.0) -> None:
    arr = np.ascontiguousarray(np.asarray(array, dtype=np.float64))
    if arr.ndim < 1 or arr.ndim > 255:
        raise ValueError(f"unsupported ndim {arr.ndim}")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(struct.pack("<d", float(dt)))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def read_kpf1(path):
    """Returns (array, dt)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise Kpf1FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (ndim,) = struct.unpack("<B", fh.read(1))
        dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        (dt,) = struct.unpack("<d", fh.read(8))
        count = 1
        for d in dims:
            count *= d
        payload = fh.read(8 * count)
        if len(payload) != 8 * count:
            raise Kpf1FormatError("truncated payload")
        arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    return arr, dt
