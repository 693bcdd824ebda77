"""Bitwise-reproducible binary32 operators, math functions and randomness."""

from .kernels import (
    add,
    cross_entropy,
    cross_entropy_backward,
    matmul,
    matmul_backward,
    mul,
    reduce_sum,
    relu,
    relu_backward,
    softmax,
    softmax_backward,
    sub,
)
from .mathfn import det_cos_turns, det_exp, det_log, det_tanh
from .parallel import get_workers, set_workers, workers
from .rng import DetRngKey, det_rand
from .tensor import (
    DimensionError,
    canonical,
    check_shape,
    deserialize_tensor,
    flip_low_bit,
    serialize_tensor,
    tensor,
    transpose,
)

__all__ = [
    "DetRngKey",
    "DimensionError",
    "add",
    "canonical",
    "check_shape",
    "cross_entropy",
    "cross_entropy_backward",
    "det_cos_turns",
    "det_exp",
    "det_log",
    "det_rand",
    "det_tanh",
    "deserialize_tensor",
    "flip_low_bit",
    "get_workers",
    "matmul",
    "matmul_backward",
    "mul",
    "reduce_sum",
    "relu",
    "relu_backward",
    "serialize_tensor",
    "set_workers",
    "softmax",
    "softmax_backward",
    "sub",
    "tensor",
    "transpose",
    "workers",
]
