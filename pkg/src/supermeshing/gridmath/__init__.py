"""Minimal NCHW tensor library with reverse-mode autodiff, Adam and gradient checks."""

from .gradcheck import check_gradients, check_parameter_gradients, numerical_gradient
from .ops import (
    UPSAMPLE_SCALES,
    abs,
    add,
    concat,
    conv2d,
    interpolation_matrix,
    leaky_relu,
    log_softmax_spatial,
    mean_all,
    mul,
    pool_channel_stats,
    pool_spatial_stats,
    resize_bilinear,
    sigmoid,
    square,
    sub,
    sum_all,
    upsample_bilinear,
)
from .optim import Adam, AdamState, adam_step
from .tensor import Parameter, Tensor, grad_enabled, no_grad

__all__ = [
    "Adam", "AdamState", "Parameter", "Tensor", "UPSAMPLE_SCALES", "abs", "adam_step", "add",
    "check_gradients", "check_parameter_gradients", "concat", "conv2d", "grad_enabled",
    "interpolation_matrix", "leaky_relu", "log_softmax_spatial", "mean_all", "mul", "no_grad",
    "numerical_gradient", "pool_channel_stats", "pool_spatial_stats", "resize_bilinear",
    "sigmoid", "square", "sub", "sum_all", "upsample_bilinear",
]
