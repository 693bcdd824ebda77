from __future__ import annotations

import math
import struct

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from refdel import detops as ops
from refdel.detops.parallel import row_blocks
from refdel.detops.rng import mix64

f32 = np.float32
WORKERS = (1, 2, 4, 8)


def bits(a) -> bytes:
    return np.asarray(a, dtype=np.float32).tobytes()


def rnd(shape, label="t", seed=0):
    return ops.det_rand(ops.DetRngKey.for_label(seed, label), shape, "normal")


# -- independent oracles ------------------------------------------------------


def scalar_matmul(a, b):
    """Triple loop over numpy float32 scalars, k ascending from +0.0."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float32)
    for i in range(m):
        for j in range(n):
            acc = f32(0)
            for kk in range(k):
                acc = f32(acc + f32(a[i, kk] * b[kk, j]))
            out[i, j] = acc
    return out


def outer_matmul(a, b):
    """Whole-matrix rank-1 accumulation in k order (no row split)."""
    acc = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    for kk in range(a.shape[1]):
        acc = (acc + np.outer(a[:, kk], b[kk]).astype(np.float32)).astype(np.float32)
    return acc


def serial_sum(values):
    acc = f32(0)
    for v in values:
        acc = f32(acc + f32(v))
    return acc


def ulp_error(got, true64):
    sp = np.spacing(np.abs(true64.astype(np.float32))).astype(np.float64)
    return np.abs(got.astype(np.float64) - true64) / sp


def central_diff(f, x, h=1e-6):
    """d f / d x for a float64 scalar function, elementwise central differences."""
    x = x.astype(np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f(x)
        flat[i] = old - h
        dn = f(x)
        flat[i] = old
        gf[i] = (up - dn) / (2 * h)
    return g


def rel_err(got, want):
    return float(np.linalg.norm(got.astype(np.float64) - want) / max(np.linalg.norm(want), 1e-12))


# -- tensors ------------------------------------------------------------------


def test_serialize_fixed_bytes():
    # tag 0x54, rank and dims as u64 little-endian, then f32 LE payload
    want = bytes([0x54]) + struct.pack("<QQ", 1, 2) + struct.pack("<ff", 1.0, 2.0)
    assert ops.serialize_tensor(np.array([1.0, 2.0], np.float32)) == want
    assert ops.serialize_tensor(f32(0)).hex() == "54" + "00" * 8 + "00" * 4


def test_serialize_rank_distinguishes_scalar():
    assert ops.serialize_tensor(f32(0)) != ops.serialize_tensor(np.zeros(1, np.float32))


@given(st.lists(st.integers(1, 4), min_size=0, max_size=3), st.integers(0, 2**32 - 1))
@settings(max_examples=60, deadline=None)
def test_serialize_roundtrip(shape, seed):
    t = ops.det_rand(ops.DetRngKey(seed), shape or (1,), "normal").reshape(shape)
    buf = ops.serialize_tensor(t)
    back, end = ops.deserialize_tensor(buf)
    assert end == len(buf) and back.shape == t.shape and bits(back) == bits(t)


def test_deserialize_rejects_truncation():
    buf = ops.serialize_tensor(np.ones((2, 3), np.float32))
    for cut in (0, 5, 12, len(buf) - 1):
        with pytest.raises(ValueError):
            ops.deserialize_tensor(buf[:cut])
    with pytest.raises(ValueError):
        ops.deserialize_tensor(b"\x00" + buf[1:])


def test_check_shape_rejects_zero_extent():
    with pytest.raises(ops.DimensionError):
        ops.check_shape((3, 0))
    with pytest.raises(ops.DimensionError):
        ops.check_shape((1 << 32, 1 << 32))


def test_flip_low_bit_changes_one_bit():
    t = np.array([1.0, 2.0, 3.0], np.float32)
    u = ops.flip_low_bit(t, 1)
    assert bits(t) != bits(u)
    diff = t.view(np.uint32) ^ u.view(np.uint32)
    assert diff.tolist() == [0, 1, 0]


def test_canonical_makes_contiguous_copy():
    a = np.arange(12, dtype=np.float64).reshape(3, 4).T
    c = ops.canonical(a)
    assert c.dtype == np.float32 and c.flags.c_contiguous
    assert ops.transpose(np.ones((2, 3), np.float32)).shape == (3, 2)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity_and_small_integers():
    a = np.array([[1, 2], [3, 4]], np.float32)
    assert bits(ops.matmul(a, np.eye(2, dtype=np.float32))) == bits(a)
    assert ops.matmul(a, np.array([[5, 6], [7, 8]], np.float32)).tolist() == [[19, 22], [43, 50]]


def test_matmul_matches_scalar_oracle():
    a, b = rnd((7, 13), "a"), rnd((13, 5), "b")
    assert bits(ops.matmul(a, b)) == bits(scalar_matmul(a, b))


@pytest.mark.parametrize("w", WORKERS)
def test_matmul_256_worker_invariant(w):
    a, b = rnd((256, 256), "a"), rnd((256, 256), "b")
    with ops.workers(w):
        got = ops.matmul(a, b)
    assert bits(got) == bits(outer_matmul(a, b))


def test_matmul_shape_errors():
    with pytest.raises(ops.DimensionError):
        ops.matmul(np.ones((2, 3), np.float32), np.ones((2, 3), np.float32))
    with pytest.raises(ops.DimensionError):
        ops.matmul(np.ones(3, np.float32), np.ones((3, 1), np.float32))


def test_matmul_backward_examples():
    ga, gb = ops.matmul_backward(np.array([[2]], np.float32), np.array([[3]], np.float32),
                                 np.array([[5]], np.float32))
    assert ga.tolist() == [[15]] and gb.tolist() == [[10]]
    a, b = rnd((4, 3), "a"), rnd((3, 2), "b")
    ga, gb = ops.matmul_backward(a, b, np.zeros((4, 2), np.float32))
    assert not ga.any() and not gb.any()
    with pytest.raises(ops.DimensionError):
        ops.matmul_backward(a, b, np.zeros((2, 2), np.float32))


def test_matmul_backward_finite_differences():
    a, b, w = rnd((8, 8), "a"), rnd((8, 8), "b"), rnd((8, 8), "w")
    ga, gb = ops.matmul_backward(a, b, w)
    fa = central_diff(lambda x: float(np.sum((x @ b.astype(np.float64)) * w)), a)
    fb = central_diff(lambda x: float(np.sum((a.astype(np.float64) @ x) * w)), b)
    assert rel_err(ga, fa) < 1e-3 and rel_err(gb, fb) < 1e-3


# -- reductions and elementwise -------------------------------------------------


def test_reduce_sum_examples():
    assert ops.reduce_sum(np.array([1, 2, 3, 4], np.float32), 0) == 10
    z = ops.reduce_sum(np.zeros(5, np.float32), 0)
    assert bits(z) == bits(f32(0))
    # a fold from +0.0 turns all-negative-zero input into +0.0
    nz = ops.reduce_sum(np.full(3, -0.0, np.float32), 0)
    assert bits(nz) == bits(f32(0))


def test_reduce_sum_axes_match_serial_oracle():
    x = rnd((5, 6, 7), "r")
    for axis in (0, 1, 2, -1):
        got = ops.reduce_sum(x, axis)
        moved = np.moveaxis(x, axis, -1)
        want = np.array([serial_sum(row) for row in moved.reshape(-1, moved.shape[-1])],
                        np.float32).reshape(moved.shape[:-1])
        assert bits(got) == bits(want)
    with pytest.raises(ops.DimensionError):
        ops.reduce_sum(x, 3)
    with pytest.raises(ops.DimensionError):
        ops.reduce_sum(f32(1), 0)


@pytest.mark.parametrize("w", (1, 4))
def test_reduce_sum_1e5_serial_oracle(w):
    v = ops.det_rand(ops.DetRngKey(7, 0), (100_000,), "normal")
    with ops.workers(w):
        got = ops.reduce_sum(v.reshape(1, -1), 1)[0]
    # frozen from serial_sum over the same draw
    assert struct.pack("<f", got).hex() == "fe053642"
    assert bits(got) == bits(serial_sum(v.tolist()))


def test_add_sub_mul():
    assert ops.add([1, 2], [3, 4]).tolist() == [4, 6]
    x = rnd((3, 4), "x")
    assert bits(ops.add(x, np.zeros((3, 4), np.float32))) == bits(x)
    m = np.array([[1, 2], [3, 4]], np.float32)
    assert ops.add(m, np.array([10, 20], np.float32)).tolist() == [[11, 22], [13, 24]]
    assert ops.sub(m, m).tolist() == [[0, 0], [0, 0]]
    assert ops.mul(m, np.array([2, 3], np.float32)).tolist() == [[2, 6], [6, 12]]
    with pytest.raises(ops.DimensionError):
        ops.add(m, np.ones(3, np.float32))


def test_relu_examples_and_nan():
    assert ops.relu(np.array([-1, 2], np.float32)).tolist() == [0, 2]
    assert ops.relu_backward(np.array([-1, 2], np.float32), np.array([5, 7], np.float32)).tolist() == [0, 7]
    assert ops.relu_backward(np.array([0.0], np.float32), np.array([3.0], np.float32)).tolist() == [0]
    r = ops.relu(np.array([np.nan, -np.inf, np.inf], np.float32))
    assert np.isnan(r[0]) and r[1] == 0 and r[2] == np.inf
    assert np.isnan(ops.relu_backward(np.array([np.nan], np.float32), np.ones(1, np.float32))[0])


def test_relu_finite_differences():
    x = rnd((8, 8), "x")
    x = np.where(np.abs(x) < 1e-2, f32(0.5), x).astype(np.float32)  # keep clear of the kink
    w = rnd((8, 8), "w")
    g = ops.relu_backward(x, w)
    fd = central_diff(lambda v: float(np.sum(np.maximum(v, 0) * w)), x)
    assert rel_err(g, fd) < 1e-3


# -- softmax and cross-entropy ----------------------------------------------------


@pytest.mark.parametrize("c", [0.0, -3.5, 17.0, 1e30, -1e30])
def test_softmax_symmetric_is_exactly_half(c):
    assert ops.softmax(np.array([c, c], np.float32)).tolist() == [0.5, 0.5]


def test_softmax_ln2():
    got = ops.softmax(np.array([0.0, math.log(2)], np.float32))
    assert np.allclose(got, [1 / 3, 2 / 3], atol=1e-6, rtol=0)


@pytest.mark.parametrize("axis", [0, 1, -1])
def test_softmax_workers_and_axes(axis):
    x = rnd((33, 10), "s")
    with ops.workers(1):
        ref = ops.softmax(x, axis)
    with ops.workers(8):
        assert bits(ops.softmax(x, axis)) == bits(ref)
    assert np.allclose(np.sum(ref, axis=axis), 1, atol=1e-6)


def _softmax64(v):
    e = np.exp(v - v.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def test_softmax_backward_finite_differences():
    x, w = rnd((4, 6), "x"), rnd((4, 6), "w")
    y = ops.softmax(x)
    g = ops.softmax_backward(y, w)
    fd = central_diff(lambda v: float(np.sum(_softmax64(v) * w)), x)
    assert rel_err(g, fd) < 1e-3
    with pytest.raises(ops.DimensionError):
        ops.softmax_backward(y, w[:2])


def test_cross_entropy_examples():
    loss = ops.cross_entropy(np.zeros((3, 4), np.float32), [0, 1, 3])
    assert loss.shape == () and abs(float(loss) - math.log(4)) < 1e-6
    assert float(ops.cross_entropy(np.array([[100.0, 0.0]], np.float32), [0])) < 1e-30
    with pytest.raises(ValueError):
        ops.cross_entropy(np.zeros((2, 3), np.float32), [0, 3])
    with pytest.raises(ValueError):
        ops.cross_entropy(np.zeros((2, 3), np.float32), [0.5, 1])
    with pytest.raises(ops.DimensionError):
        ops.cross_entropy(np.zeros((2, 3), np.float32), [0])


def test_cross_entropy_finite_differences():
    x = rnd((5, 4), "l")
    labels = [0, 3, 1, 1, 2]

    def loss64(v):
        m = v.max(axis=1, keepdims=True)
        lse = np.log(np.exp(v - m).sum(axis=1)) + m[:, 0]
        return float(np.mean(lse - v[np.arange(5), labels]))

    assert abs(float(ops.cross_entropy(x, labels)) - loss64(x.astype(np.float64))) < 1e-6
    assert rel_err(ops.cross_entropy_backward(x, labels), central_diff(loss64, x)) < 1e-3


# -- elementary functions ------------------------------------------------------------


def test_det_exp_points():
    assert ops.det_exp(f32(0)) == 1
    e = mpmath.mpf(float(ops.det_exp(f32(1))))
    ulp = float(np.spacing(f32(math.e)))
    assert abs(float(e - mpmath.e)) <= 4 * ulp
    assert ops.det_exp(f32(100)) == np.inf
    assert ops.det_exp(f32(-200)) == 0
    assert ops.det_exp(f32(-np.inf)) == 0
    assert np.isnan(ops.det_exp(f32(np.nan)))
    assert isinstance(ops.det_exp(f32(1)), np.float32)


def test_det_exp_subnormal_range():
    x = np.linspace(-103, -87.5, 2000).astype(np.float32)
    got = ops.det_exp(x).astype(np.float64)
    want = np.exp(x.astype(np.float64))
    # subnormals: absolute error within a few subnormal steps
    assert np.max(np.abs(got - want)) <= 4 * 2.0**-149


def test_det_log_accuracy_and_specials():
    rng = np.random.default_rng(1)
    x = np.exp(rng.uniform(-80, 80, 100_000)).astype(np.float32)
    assert ulp_error(ops.det_log(x), np.log(x.astype(np.float64))).max() <= 4
    sub = np.array([1e-40, 1e-45], np.float32)
    assert np.allclose(ops.det_log(sub), np.log(sub.astype(np.float64)), rtol=1e-6)
    sp = ops.det_log(np.array([0.0, -1.0, np.inf, np.nan], np.float32))
    assert sp[0] == -np.inf and np.isnan(sp[1]) and sp[2] == np.inf and np.isnan(sp[3])


def test_det_tanh_accuracy():
    rng = np.random.default_rng(2)
    x = rng.uniform(-9, 9, 100_000).astype(np.float32)
    assert ulp_error(ops.det_tanh(x), np.tanh(x.astype(np.float64))).max() <= 4
    big = ops.det_tanh(np.array([50.0, -50.0, np.inf], np.float32))
    assert big.tolist() == [1.0, -1.0, 1.0]


def test_det_cos_turns():
    u = np.linspace(0, 1, 10_001, endpoint=False).astype(np.float32)
    got = ops.det_cos_turns(u)
    assert np.max(np.abs(got - np.cos(2 * np.pi * u.astype(np.float64)))) < 2e-7
    assert ops.det_cos_turns(np.array([0.0, 0.25, 0.5, 0.75], np.float32)).tolist() == [1, 0, -1, 0]


# -- randomness ------------------------------------------------------------------


def _splitmix(x: int) -> int:
    m = (1 << 64) - 1
    z = (x + 0x9E3779B97F4A7C15) & m
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & m
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & m
    return z ^ (z >> 31)


def test_mix64_is_splitmix64():
    assert _splitmix(0) == 0xE220A8397B1DCDAF  # first output of SplitMix64 from state 0
    key = ops.DetRngKey(123456789, 42)
    ctr = np.arange(50, dtype=np.uint64)
    got = mix64(ctr, key).tolist()
    assert got == [_splitmix(123456789 ^ 42 ^ i) for i in range(50)]


def test_det_rand_purity_and_streams():
    k = ops.DetRngKey(5, 1)
    for dist in ("uniform", "normal"):
        assert bits(ops.det_rand(k, (64,), dist)) == bits(ops.det_rand(k, (64,), dist))
        assert bits(ops.det_rand(k, (64,), dist)) != bits(ops.det_rand(ops.DetRngKey(5, 2), (64,), dist))
    # element i is independent of the shape it is drawn in
    assert bits(ops.det_rand(k, (6, 4))[1]) == bits(ops.det_rand(k, (24,))[4:8])


def test_det_rand_statistics():
    u = ops.det_rand(ops.DetRngKey(11), (1_000_000,))
    assert 0.499 <= float(np.mean(u.astype(np.float64))) <= 0.501
    assert u.min() >= 0 and u.max() < 1
    n = ops.det_rand(ops.DetRngKey(12), (200_000,), "normal").astype(np.float64)
    assert abs(n.mean()) < 0.01 and abs(n.std() - 1) < 0.01
    r = ops.det_rand(ops.DetRngKey(13), (50_000,), "int_range", low=-3, high=4)
    assert set(np.unique(r).tolist()) == set(range(-3, 4))


def test_det_rand_errors():
    with pytest.raises(ValueError):
        ops.det_rand(ops.DetRngKey(1), (3,), "cauchy")
    with pytest.raises(ValueError):
        ops.det_rand(ops.DetRngKey(1), (3,), "int_range", low=2, high=2)
    with pytest.raises(ValueError):
        ops.DetRngKey(-1)
    assert ops.DetRngKey.for_label(1, "a") != ops.DetRngKey.for_label(1, "b")


# -- workers ---------------------------------------------------------------------


def test_worker_settings():
    with pytest.raises(ValueError):
        ops.set_workers(0)
    with ops.workers(3):
        assert ops.get_workers() == 3
    assert ops.get_workers() == 1
    for rows in (1, 5, 16):
        for n in (1, 3, 8):
            blocks = row_blocks(rows, n)
            assert blocks[0][0] == 0 and blocks[-1][1] == rows
            assert all(b[1] == c[0] for b, c in zip(blocks, blocks[1:]))
