"""Minimal tensor arithmetic with reverse-mode autodiff."""

from . import kernels
from .gradcheck import grad_check, grad_check_params
from .tensor import (
    ShapeError,
    Tensor,
    activation,
    add,
    add_channel_bias,
    as_tensor,
    avg_pool,
    concat,
    conv2d,
    div,
    fc,
    flatten,
    getitem,
    group_norm,
    is_grad_enabled,
    l2norm,
    matmul,
    mean,
    mul,
    neg,
    no_grad,
    parameter,
    relu,
    reshape,
    silu,
    softmax_rows,
    stack,
    sub,
    sum,
    transpose,
    upsample_nearest,
)

__all__ = [
    "ShapeError", "Tensor", "activation", "add", "add_channel_bias", "as_tensor",
    "avg_pool", "concat", "conv2d", "div", "fc", "flatten", "getitem", "grad_check",
    "grad_check_params", "group_norm", "is_grad_enabled", "kernels", "l2norm", "matmul",
    "mean", "mul", "neg", "no_grad", "parameter", "relu", "reshape", "silu",
    "softmax_rows", "stack", "sub", "sum", "transpose", "upsample_nearest",
]
