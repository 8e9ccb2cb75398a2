"""Minimal binary container for float64 arrays.

One array per file: an 8-byte magic string, a dtype tag, the rank and
shape as little-endian uint64, then the row-major raw payload.  The
format is deliberately dumb so any language can parse it with a dozen
lines of code.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import InputDomainError

MAGIC = b"RAYSDF\x00\x01"
_DTYPE_TAGS = {b"f8": np.float64}


def save_array(path, arr: np.ndarray) -> None:
    """Write one float64 array to ``path`` in the container format."""
    arr = np.asarray(arr, dtype=np.float64)
    # note: ascontiguousarray would silently promote 0-d arrays to 1-d
    arr = np.ascontiguousarray(arr).reshape(arr.shape)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(b"f8")
        fh.write(struct.pack("<Q", arr.ndim))
        for n in arr.shape:
            fh.write(struct.pack("<Q", n))
        fh.write(arr.astype("<f8").tobytes(order="C"))


def load_array(path) -> np.ndarray:
    """Read an array written by :func:`save_array`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 2 + 8 or data[: len(MAGIC)] != MAGIC:
        raise InputDomainError(f"{path}: not an array container (bad magic)")
    off = len(MAGIC)
    tag = data[off : off + 2]
    if tag not in _DTYPE_TAGS:
        raise InputDomainError(f"{path}: unknown dtype tag {tag!r}")
    off += 2
    (ndim,) = struct.unpack_from("<Q", data, off)
    off += 8
    if ndim > 32:
        raise InputDomainError(f"{path}: implausible rank {ndim}")
    shape = []
    for _ in range(ndim):
        (n,) = struct.unpack_from("<Q", data, off)
        shape.append(int(n))
        off += 8
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = data[off:]
    if len(payload) != 8 * count:
        raise InputDomainError(
            f"{path}: payload is {len(payload)} bytes, expected {8 * count}"
        )
    arr = np.frombuffer(payload, dtype="<f8", count=count)
    return arr.reshape(shape).astype(np.float64, copy=True)
