"""Reverse-mode automatic differentiation on dense float64 tensors."""

from .functional import (
    add,
    channel_affine,
    concat,
    conv,
    conv2d,
    conv3d,
    log_softmax,
    relu,
    scale,
    softmax,
    softmax_cross_entropy,
    total,
)
from .init import init_constant, init_gaussian, init_he
from .optim import AdamState, ConstantLR, PolyLR, StepLR, adam_step
from .tensor import NonFiniteValue, Tensor, grad_enabled, no_grad, topological_order

__all__ = [
    "AdamState", "ConstantLR", "NonFiniteValue", "PolyLR", "StepLR", "Tensor",
    "adam_step", "add", "channel_affine", "concat", "conv", "conv2d", "conv3d",
    "grad_enabled", "init_constant", "init_gaussian", "init_he", "log_softmax",
    "no_grad", "relu", "scale", "softmax", "softmax_cross_entropy", "topological_order", "total",
]
