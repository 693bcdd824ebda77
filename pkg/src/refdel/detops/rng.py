"""Counter-based deterministic random tensors.

Element ``i`` of every draw is a pure function of ``(seed, stream, i)``::

    z = (seed ^ stream ^ i) + 0x9E3779B97F4A7C15        (mod 2**64)
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    z =  z ^ (z >> 31)

which is the SplitMix64 output function. ``uniform`` keeps the high 24 bits
of ``z`` and scales by 2**-24 (exact in binary32). ``normal`` uses counters
``2i`` and ``2i + 1`` with Box-Muller built from :mod:`.mathfn`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .mathfn import det_cos_turns, det_log
from .tensor import check_shape

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class DetRngKey:
    seed: int
    stream: int = 0

    def __post_init__(self):
        for v in (self.seed, self.stream):
            if not 0 <= v <= _MASK64:
                raise ValueError("seed and stream must be unsigned 64-bit")

    @classmethod
    def for_label(cls, seed: int, label: str) -> "DetRngKey":
        """Stream = first 8 bytes (little-endian) of SHA-256 of ``label``."""
        digest = hashlib.sha256(label.encode("utf-8")).digest()
        return cls(seed, int.from_bytes(digest[:8], "little"))


def mix64(counters: np.ndarray, key: DetRngKey) -> np.ndarray:
    z = counters.astype(np.uint64) ^ np.uint64(key.seed ^ key.stream)
    z = z + GOLDEN
    z = (z ^ (z >> np.uint64(30))) * MIX1
    z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def _unit(z: np.ndarray) -> np.ndarray:
    return (z >> np.uint64(40)).astype(np.float32) * np.float32(2.0**-24)


def det_rand(
    key: DetRngKey,
    shape: Sequence[int],
    dist: str = "uniform",
    *,
    low: float = 0.0,
    high: float = 1.0,
) -> np.ndarray:
    """Deterministic tensor of the given shape.

    ``uniform`` draws from [0, 1); ``normal`` from N(0, 1); ``int_range``
    draws integers in [low, high) (returned as binary32 values).
    """
    shape = check_shape(shape)
    n = int(np.prod(shape, dtype=np.int64)) if shape else 1
    idx = np.arange(n, dtype=np.uint64)
    if dist == "uniform":
        out = _unit(mix64(idx, key))
    elif dist == "normal":
        u1 = _unit(mix64(idx * np.uint64(2), key))
        u2 = _unit(mix64(idx * np.uint64(2) + np.uint64(1), key))
        u1 = np.float32(1) - u1
        t = np.float32(-2) * det_log(u1)
        out = np.sqrt(t) * det_cos_turns(u2)
    elif dist == "int_range":
        lo, hi = int(low), int(high)
        if hi <= lo:
            raise ValueError("int_range needs high > low")
        span = hi - lo
        if span > 1 << 24:
            raise ValueError("int_range span must fit in 24 bits")
        top = mix64(idx, key) >> np.uint64(40)
        out = ((top * np.uint64(span)) >> np.uint64(24)).astype(np.int64) + lo
        out = out.astype(np.float32)
    else:
        raise ValueError(f"unknown distribution {dist!r}")
    return np.ascontiguousarray(out, dtype=np.float32).reshape(shape)
