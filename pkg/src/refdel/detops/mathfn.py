"""Elementary functions built only from binary32 add, multiply and divide.

Platform libm results differ in the last bits between vendors, so these
replace ``np.exp``/``np.log``/``np.tanh`` wherever a value feeds a
commitment. Each function is a fixed straight-line sequence of float32
operations plus exact exponent manipulation; numpy evaluates every ufunc
with a single rounding, which is exactly the contract we need.
"""

from __future__ import annotations

import numpy as np

f32 = np.float32

LOG2E = f32(1.44269504088896341)
# Cody-Waite split of ln 2: LN2_HI has 9 significant bits, so k * LN2_HI is
# exact for |k| <= 2**15.
LN2_HI = f32(0.693359375)
LN2_LO = f32(-2.12194440e-4)

# Taylor coefficients 1/n! for exp on |r| <= ln2/2, highest degree first.
_EXP_COEFFS = tuple(f32(c) for c in (
    1 / 5040, 1 / 720, 1 / 120, 1 / 24, 1 / 6, 1 / 2, 1.0, 1.0,
))

# Odd Taylor coefficients of tanh (x^3 .. x^19) for |x| < TANH_SERIES_MAX.
_TANH_COEFFS = tuple(f32(c) for c in (
    -0.00023912911424355248, 0.000590027440945586, -0.0014558343870513183,
    0.003592128036572481, -0.008863235529902197, 0.021869488536155203,
    -0.05396825396825397, 0.13333333333333333, -0.3333333333333333,
))
TANH_SERIES_MAX = f32(0.55)

# 2 * atanh series: log(m) = 2s + 2s^3/3 + ... with s = (m-1)/(m+1).
_LOG_COEFFS = tuple(f32(c) for c in (2 / 11, 2 / 9, 2 / 7, 2 / 5, 2 / 3))
SQRT2 = f32(1.41421356237309505)

# sin/cos on |a| <= pi/4, highest degree first.
_SIN_COEFFS = tuple(f32(c) for c in (1 / 362880, -1 / 5040, 1 / 120, -1 / 6))
_COS_COEFFS = tuple(f32(c) for c in (1 / 40320, -1 / 720, 1 / 24, -1 / 2, 1.0))
TWO_PI = f32(6.28318530717958648)

EXP_MAX_INPUT = f32(89.0)
EXP_MIN_INPUT = f32(-104.0)


def _arr(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def _out(res: np.ndarray, like):
    if np.ndim(like) == 0 and not isinstance(like, np.ndarray):
        return f32(res)
    return np.ascontiguousarray(res, dtype=np.float32)


def _horner(coeffs, r: np.ndarray) -> np.ndarray:
    p = np.full_like(r, coeffs[0])
    for c in coeffs[1:]:
        p = p * r
        p = p + c
    return p


def pow2(k: np.ndarray) -> np.ndarray:
    """2**k as float32 for integer-valued k in [-126, 127], built from bits."""
    bits = (k.astype(np.int32) + np.int32(127)).astype(np.uint32) << np.uint32(23)
    return bits.view(np.float32)


def det_exp(x):
    """exp(x) in binary32 with a fixed operation order.

    Range reduction x = k ln2 + r, degree-7 polynomial in r, then scaling by
    2**k in two exact halves so subnormal results round once. Overflow gives
    +inf, deep underflow gives +0.0, NaN propagates.
    """
    xa = _arr(x)
    nan = np.isnan(xa)
    xc = np.clip(np.where(nan, f32(0), xa), EXP_MIN_INPUT, EXP_MAX_INPUT)
    k = np.floor(xc * LOG2E + f32(0.5))
    r = xc - k * LN2_HI
    r = r - k * LN2_LO
    p = _horner(_EXP_COEFFS, r)
    k1 = np.floor(k * f32(0.5))
    k2 = k - k1
    with np.errstate(over="ignore", under="ignore"):
        res = p * pow2(k1)
        res = res * pow2(k2)
    res = np.where(xa > EXP_MAX_INPUT, f32(np.inf), res)
    res = np.where(xa < EXP_MIN_INPUT, f32(0), res)
    res = np.where(nan, xa, res)
    return _out(res, x)


def det_tanh(x):
    """tanh(x): odd series near zero, 1 - 2/(exp(2|x|) + 1) elsewhere."""
    xa = _arr(x)
    ax = np.abs(xa)
    with np.errstate(over="ignore", invalid="ignore"):
        z = xa * xa
        q = _horner(_TANH_COEFFS, z)
        small = xa + xa * (z * q)
    e = det_exp(ax + ax)
    with np.errstate(over="ignore", invalid="ignore"):
        big = f32(1) - f32(2) / (e + f32(1))
    big = np.copysign(big, xa)
    res = np.where(ax < TANH_SERIES_MAX, small, big)
    res = np.where(np.isnan(xa), xa, res)
    return _out(res, x)


def det_log(x):
    """Natural log for binary32 inputs; log(0) = -inf, negative inputs give NaN."""
    xa = _arr(x)
    bad = ~(xa > 0) | np.isinf(xa)
    xs = np.where(bad, f32(1), xa)
    sub = xs < f32(1.1754944e-38)
    with np.errstate(over="ignore"):
        xs = np.where(sub, xs * f32(16777216.0), xs)
    bits = xs.view(np.uint32)
    e = ((bits >> np.uint32(23)) & np.uint32(0xFF)).astype(np.int32) - 127
    e = e - np.where(sub, 24, 0)
    m = ((bits & np.uint32(0x7FFFFF)) | np.uint32(0x3F800000)).view(np.float32)
    hi = m > SQRT2
    m = np.where(hi, m * f32(0.5), m)
    e = e + hi.astype(np.int32)
    s = (m - f32(1)) / (m + f32(1))
    s2 = s * s
    p = _horner(_LOG_COEFFS, s2)
    logm = s + s
    logm = logm + s * (s2 * p)
    ef = e.astype(np.float32)
    res = ef * LN2_LO
    res = res + logm
    res = res + ef * LN2_HI
    with np.errstate(invalid="ignore"):
        res = np.where(xa == 0, f32(-np.inf), res)
        res = np.where(xa < 0, f32(np.nan), res)
        res = np.where(np.isposinf(xa), f32(np.inf), res)
        res = np.where(np.isnan(xa), xa, res)
    return _out(res, x)


def det_cos_turns(u):
    """cos(2*pi*u) for u in [0, 1) with exact quarter-turn reduction."""
    ua = _arr(u)
    q = np.floor(ua * f32(4) + f32(0.5))
    f = ua - q * f32(0.25)
    a = f * TWO_PI
    a2 = a * a
    c = _horner(_COS_COEFFS, a2)
    s = _horner(_SIN_COEFFS, a2)
    s = a + a * (a2 * s)
    quadrant = np.mod(q, f32(4)).astype(np.int8)
    res = np.select(
        [quadrant == 0, quadrant == 1, quadrant == 2],
        [c, -s, -c],
        default=s,
    ).astype(np.float32)
    return _out(res, u)
