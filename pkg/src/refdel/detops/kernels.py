"""Fixed-order tensor operators.

Every accumulation is a left fold in ascending index order starting from
+0.0, with each multiply and add rounded to binary32. Parallelism is only
applied across output rows.
"""

from __future__ import annotations

import numpy as np

from .mathfn import det_exp, det_log
from .parallel import run_rows
from .tensor import DimensionError, canonical, transpose

f32 = np.float32


def matmul(a, b) -> np.ndarray:
    a, b = canonical(a), canonical(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects rank-2 operands, got {a.shape} x {b.shape}")
    m, k = a.shape
    k2, n = b.shape
    if k != k2:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    out = np.empty((m, n), dtype=np.float32)

    def rows(lo: int, hi: int) -> None:
        acc = np.zeros((hi - lo, n), dtype=np.float32)
        for kk in range(k):
            prod = a[lo:hi, kk, None] * b[kk]
            acc += prod
        out[lo:hi] = acc

    run_rows(rows, m)
    return out


def matmul_backward(a, b, grad_c) -> tuple[np.ndarray, np.ndarray]:
    a, b, grad_c = canonical(a), canonical(b), canonical(grad_c)
    if a.ndim != 2 or b.ndim != 2 or grad_c.shape != (a.shape[0], b.shape[1]):
        raise DimensionError(
            f"matmul_backward shapes inconsistent: {a.shape}, {b.shape}, {grad_c.shape}"
        )
    return matmul(grad_c, transpose(b)), matmul(transpose(a), grad_c)


def _fold_last(x2: np.ndarray) -> np.ndarray:
    # add.accumulate is a strict running sum; the trailing +0.0 turns the
    # all-negative-zero case into the +0.0 a fold from +0.0 would give.
    out = np.empty(x2.shape[0], dtype=np.float32)

    def rows(lo: int, hi: int) -> None:
        out[lo:hi] = np.add.accumulate(x2[lo:hi], axis=1, dtype=np.float32)[:, -1] + f32(0)

    run_rows(rows, x2.shape[0])
    return out


def reduce_sum(a, axis: int = 0) -> np.ndarray:
    """Serial ascending-index sum along ``axis`` (other axes parallel)."""
    a = canonical(a)
    if a.ndim == 0:
        raise DimensionError("cannot reduce a scalar")
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    axis %= a.ndim
    moved = np.moveaxis(a, axis, -1)
    rest = moved.shape[:-1]
    flat = np.ascontiguousarray(moved).reshape(-1, a.shape[axis])
    return _fold_last(flat).reshape(rest)


def _check_binary(a: np.ndarray, b: np.ndarray, name: str) -> None:
    if a.shape == b.shape:
        return
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        return
    raise DimensionError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def add(a, b) -> np.ndarray:
    a, b = canonical(a), canonical(b)
    _check_binary(a, b, "add")
    return canonical(a + b)


def sub(a, b) -> np.ndarray:
    a, b = canonical(a), canonical(b)
    _check_binary(a, b, "sub")
    return canonical(a - b)


def mul(a, b) -> np.ndarray:
    a, b = canonical(a), canonical(b)
    _check_binary(a, b, "mul")
    return canonical(a * b)


def relu(a) -> np.ndarray:
    a = canonical(a)
    return canonical(np.where(a > 0, a, np.where(np.isnan(a), a, f32(0))))


def relu_backward(a, grad_out) -> np.ndarray:
    """Passes the gradient where a > 0; the subgradient at 0 is 0."""
    a, grad_out = canonical(a), canonical(grad_out)
    if a.shape != grad_out.shape:
        raise DimensionError(f"relu_backward shapes differ: {a.shape} vs {grad_out.shape}")
    res = np.where(a > 0, grad_out, f32(0))
    return canonical(np.where(np.isnan(a), a, res))


def _rows_view(a: np.ndarray, axis: int) -> tuple[np.ndarray, tuple[int, ...]]:
    if a.ndim == 0:
        raise DimensionError("softmax needs rank >= 1")
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"axis {axis} out of range for rank {a.ndim}")
    moved = np.ascontiguousarray(np.moveaxis(a, axis, -1))
    return moved.reshape(-1, a.shape[axis]), moved.shape


def _restore(rows: np.ndarray, moved_shape, axis: int) -> np.ndarray:
    return canonical(np.moveaxis(rows.reshape(moved_shape), -1, axis))


def softmax(a, axis: int = -1) -> np.ndarray:
    a = canonical(a)
    x, moved_shape = _rows_view(a, axis)
    out = np.empty_like(x)

    def rows(lo: int, hi: int) -> None:
        blk = x[lo:hi]
        e = det_exp(blk - np.max(blk, axis=1, keepdims=True))
        s = _serial_rows(e)
        out[lo:hi] = e / s[:, None]

    run_rows(rows, x.shape[0])
    return _restore(out, moved_shape, axis)


def _serial_rows(x2: np.ndarray) -> np.ndarray:
    return np.add.accumulate(x2, axis=1, dtype=np.float32)[:, -1] + f32(0)


def softmax_backward(y, grad_out, axis: int = -1) -> np.ndarray:
    """grad_x = y * (g - sum(g * y)) with the inner sum serial per row."""
    y, grad_out = canonical(y), canonical(grad_out)
    if y.shape != grad_out.shape:
        raise DimensionError(f"softmax_backward shapes differ: {y.shape} vs {grad_out.shape}")
    yr, moved_shape = _rows_view(y, axis)
    gr, _ = _rows_view(grad_out, axis)
    out = np.empty_like(yr)

    def rows(lo: int, hi: int) -> None:
        dot = _serial_rows(gr[lo:hi] * yr[lo:hi])
        out[lo:hi] = yr[lo:hi] * (gr[lo:hi] - dot[:, None])

    run_rows(rows, yr.shape[0])
    return _restore(out, moved_shape, axis)


def _labels(logits: np.ndarray, labels) -> np.ndarray:
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [B, C] logits, got {logits.shape}")
    lab = np.asarray(labels)
    if lab.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {lab.shape} does not match batch {logits.shape[0]}")
    idx = lab.astype(np.int64)
    if not np.array_equal(idx, lab) or np.any(idx < 0) or np.any(idx >= logits.shape[1]):
        raise ValueError(f"labels must be integers in [0, {logits.shape[1]})")
    return idx


def cross_entropy(logits, labels) -> np.ndarray:
    """Mean negative log-likelihood; returns a rank-0 tensor."""
    logits = canonical(logits)
    idx = _labels(logits, labels)
    b = logits.shape[0]
    m = np.max(logits, axis=1)
    shifted = logits - m[:, None]
    s = _serial_rows(det_exp(shifted))
    picked = shifted[np.arange(b), idx]
    per_row = det_log(s) - picked
    total = reduce_sum(per_row, 0)
    return canonical(total / f32(b))


def cross_entropy_backward(logits, labels) -> np.ndarray:
    """(softmax(logits) - onehot(labels)) / B."""
    logits = canonical(logits)
    idx = _labels(logits, labels)
    b = logits.shape[0]
    p = softmax(logits, axis=1)
    p[np.arange(b), idx] -= f32(1)
    return canonical(p / f32(b))
