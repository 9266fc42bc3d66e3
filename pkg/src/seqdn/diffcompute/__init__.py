"""Minimal float64 reverse-mode autodiff with an Adam optimizer."""

from .optim import AdamState, adam_step, zero_grad
from .tensor import (
    COSINE_EPS,
    ShapeError,
    Tensor,
    add,
    add_bias,
    backward,
    concat,
    cosine_similarity,
    div,
    exp,
    gather_rows,
    is_grad_enabled,
    l2_norm,
    log,
    matmul,
    mean,
    mse,
    mul,
    mul_rows,
    no_grad,
    pairwise_cosine,
    relu,
    reshape,
    scalar_mul,
    sigmoid,
    slice_,
    softmax_cross_entropy,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


__all__ = [
    "AdamState",
    "COSINE_EPS",
    "ShapeError",
    "Tensor",
    "adam_step",
    "add",
    "add_bias",
    "backward",
    "concat",
    "cosine_similarity",
    "div",
    "exp",
    "gather_rows",
    "is_grad_enabled",
    "l2_norm",
    "log",
    "matmul",
    "mean",
    "mse",
    "mul",
    "mul_rows",
    "no_grad",
    "pairwise_cosine",
    "parameter",
    "relu",
    "reshape",
    "scalar_mul",
    "sigmoid",
    "slice_",
    "softmax_cross_entropy",
    "stack",
    "sub",
    "sum_",
    "tanh",
    "transpose",
    "zero_grad",
]
