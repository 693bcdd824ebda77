"""Elementwise optimizer updates in binary32 with a fixed operation order."""

from __future__ import annotations

import numpy as np

from ..detops import DimensionError, canonical

f32 = np.float32


def _same(*ts: np.ndarray) -> None:
    if len({t.shape for t in ts}) != 1:
        raise DimensionError(f"optimizer operands differ in shape: {[t.shape for t in ts]}")


def pow_f32(base: float, n: int) -> np.float32:
    """base**n by square-and-multiply over the bits of n, least significant first."""
    result, b = f32(1), f32(base)
    while n:
        if n & 1:
            result = f32(result * b)
        b = f32(b * b)
        n >>= 1
    return result


def sgd_update(param, grad, lr: float) -> np.ndarray:
    param, grad = canonical(param), canonical(grad)
    _same(param, grad)
    return canonical(param - f32(lr) * grad)


def adam_update(param, grad, m, v, t: int, beta1: float, beta2: float, eps: float, lr: float):
    """One Adam step with bias correction.

    Order of operations (each rounded to binary32)::

        m'   = beta1*m + (1-beta1)*g
        v'   = beta2*v + (1-beta2)*(g*g)
        mhat = m' / (1 - beta1**t)
        vhat = v' / (1 - beta2**t)
        p'   = p - (lr*mhat) / (sqrt(vhat) + eps)
    """
    if t < 1:
        raise ValueError("Adam timestep must be >= 1")
    param, grad, m, v = (canonical(x) for x in (param, grad, m, v))
    _same(param, grad, m, v)
    b1, b2 = f32(beta1), f32(beta2)
    m2 = b1 * m + (f32(1) - b1) * grad
    v2 = b2 * v + (f32(1) - b2) * (grad * grad)
    bc1 = f32(1) - pow_f32(beta1, t)
    bc2 = f32(1) - pow_f32(beta2, t)
    mhat = m2 / bc1
    vhat = v2 / bc2
    denom = np.sqrt(vhat) + f32(eps)
    p2 = param - (f32(lr) * mhat) / denom
    return canonical(p2), canonical(m2), canonical(v2)
