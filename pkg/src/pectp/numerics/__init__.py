"""Tensor arithmetic, reverse-mode gradients and finite-difference checking."""

from pectp.numerics.gradcheck import NonFiniteLossError, grad_check
from pectp.numerics.kernels import BACKEND
from pectp.numerics.tensor import (
    LAYER_NORM_EPS,
    ShapeError,
    Tensor,
    add,
    backward,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    reshape,
    scale,
    sigmoid_bce,
    slice_,
    softmax,
    softmax_cross_entropy,
    stack,
    sub,
    sum_squares,
    transpose,
)

__all__ = [
    "BACKEND",
    "LAYER_NORM_EPS",
    "NonFiniteLossError",
    "ShapeError",
    "Tensor",
    "add",
    "backward",
    "concat",
    "gelu",
    "grad_check",
    "layer_norm",
    "matmul",
    "mul",
    "reduce_mean",
    "reduce_sum",
    "reshape",
    "scale",
    "sigmoid_bce",
    "slice_",
    "softmax",
    "softmax_cross_entropy",
    "stack",
    "sub",
    "sum_squares",
    "transpose",
]
