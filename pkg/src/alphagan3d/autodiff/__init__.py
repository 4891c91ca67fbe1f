"""Tensor autodiff engine: dense numpy tensors with reverse-mode
differentiation, second-order capable on the operation set used by the
adversarial losses."""

from .tensor import (
    DiffTensor,
    GradTape,
    backward,
    constant,
    grad,
    grad_enabled,
    no_grad,
    ones,
    tensor,
    zeros,
)
from .ops import (
    abs_,
    activation,
    add,
    add_scalar,
    broadcast_to,
    dense,
    div,
    elementwise,
    embed,
    l2_norm_per_sample,
    leaky_relu,
    matmul,
    mean,
    mul,
    narrow,
    neg,
    reduce,
    relu,
    reshape,
    sample,
    scale,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose2d,
)
from .conv import (
    conv3d,
    conv3d_output_shape,
    conv_transpose3d,
    conv_transpose3d_output_shape,
)
from . import kernels

__all__ = [
    "DiffTensor", "GradTape", "backward", "constant", "grad", "grad_enabled",
    "no_grad", "ones", "tensor", "zeros",
    "abs_", "activation", "add", "add_scalar", "broadcast_to", "dense", "div",
    "elementwise", "embed", "l2_norm_per_sample", "leaky_relu", "matmul",
    "mean", "mul", "narrow", "neg", "reduce", "relu", "reshape", "sample",
    "scale", "sqrt", "square", "sub", "sum_", "tanh", "transpose2d",
    "conv3d", "conv3d_output_shape", "conv_transpose3d",
    "conv_transpose3d_output_shape", "kernels",
]
