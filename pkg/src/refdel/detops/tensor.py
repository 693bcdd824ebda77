"""Canonical tensors and their byte encoding.

Tensors are plain ``numpy.float32`` arrays held in C (row-major) order.
Every producer in this package returns canonical arrays, so strides never
leak into accumulation order.
"""

from __future__ import annotations

import struct
from typing import Iterable, Sequence

import numpy as np

TENSOR_TAG = 0x54
_U64 = struct.Struct("<Q")


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested operator."""


def canonical(a) -> np.ndarray:
    """Return ``a`` as a C-contiguous float32 array (copying if needed)."""
    arr = np.asarray(a, dtype=np.float32)
    if not arr.flags.c_contiguous:
        arr = np.ascontiguousarray(arr)
    return arr


def tensor(values, shape: Sequence[int] | None = None) -> np.ndarray:
    arr = canonical(values)
    if shape is not None:
        shape = tuple(int(d) for d in shape)
        check_shape(shape)
        arr = arr.reshape(shape).copy()
    return arr


def check_shape(shape: Iterable[int]) -> tuple[int, ...]:
    dims = tuple(int(d) for d in shape)
    count = 1
    for d in dims:
        if d < 1:
            raise DimensionError(f"extent must be >= 1, got {dims}")
        count *= d
    if count >= 1 << 63:
        raise DimensionError(f"element count of {dims} overflows 63 bits")
    return dims


def transpose(a: np.ndarray) -> np.ndarray:
    """Rank-2 transpose materialized as a fresh row-major copy."""
    if a.ndim != 2:
        raise DimensionError(f"transpose expects rank 2, got rank {a.ndim}")
    return np.ascontiguousarray(a.T)


def serialize_tensor(t: np.ndarray) -> bytes:
    t = canonical(t)
    head = bytes([TENSOR_TAG]) + _U64.pack(t.ndim)
    head += b"".join(_U64.pack(d) for d in t.shape)
    return head + t.astype("<f4", copy=False).tobytes(order="C")


def deserialize_tensor(buf: bytes | memoryview, offset: int = 0) -> tuple[np.ndarray, int]:
    """Decode one tensor starting at ``offset``; returns ``(tensor, next_offset)``."""
    buf = memoryview(buf)
    if len(buf) < offset + 9 or buf[offset] != TENSOR_TAG:
        raise ValueError("not a canonical tensor encoding")
    (rank,) = _U64.unpack_from(buf, offset + 1)
    pos = offset + 9
    if rank > 64 or len(buf) < pos + 8 * rank:
        raise ValueError("truncated tensor header")
    dims = tuple(_U64.unpack_from(buf, pos + 8 * i)[0] for i in range(rank))
    pos += 8 * rank
    check_shape(dims)
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    end = pos + 4 * count
    if len(buf) < end:
        raise ValueError("truncated tensor payload")
    values = np.frombuffer(buf[pos:end], dtype="<f4").astype(np.float32)
    return values.reshape(dims).copy(), end


def flip_low_bit(t: np.ndarray, index: int = 0) -> np.ndarray:
    """Copy of ``t`` with the lowest mantissa bit of one element toggled."""
    out = canonical(t).copy()
    flat = out.reshape(-1).view(np.uint32)
    flat[index % flat.size] ^= np.uint32(1)
    return out


def nbytes(t: np.ndarray) -> int:
    return 9 + 8 * t.ndim + 4 * t.size
