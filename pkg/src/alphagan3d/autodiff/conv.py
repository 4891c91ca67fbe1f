"""Differentiable 3D convolution and transposed convolution.

Three bilinear kernels close under differentiation:

* ``fwd(x, w)``  — cross-correlation;
* ``dx(g, w)``   — its adjoint in the input slot (also the forward map of
  the transposed convolution);
* ``dw(x, g)``   — its adjoint in the weight slot.

Each one's derivative in either argument is again one of the three, so
gradient-of-gradient expressions (the gradient penalties) stay inside
this set and every path is differentiable to second order.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from . import kernels
from .tensor import DiffTensor, apply_op
from .ops import add, broadcast_to, reshape


class _ConvFwd:
    save_output = False

    @staticmethod
    def forward(saved, x, w, stride, padding):
        saved["stride"], saved["padding"] = stride, padding
        saved["in_spatial"] = x.shape[2:]
        saved["k"] = w.shape[2]
        return kernels.conv3d_forward(x, w, stride, padding)

    @staticmethod
    def backward(node, g):
        x, w = node.inputs
        s = node.saved
        gx = _conv_dx(g, w, s["stride"], s["padding"], s["in_spatial"])
        gw = _conv_dw(x, g, s["k"], s["stride"], s["padding"])
        return gx, gw


class _ConvDx:
    save_output = False

    @staticmethod
    def forward(saved, g, w, stride, padding, out_spatial):
        saved["stride"], saved["padding"] = stride, padding
        saved["k"] = w.shape[2]
        return kernels.conv3d_input_grad(g, w, stride, padding, out_spatial)

    @staticmethod
    def backward(node, c):
        g, w = node.inputs
        s = node.saved
        gg = _conv_fwd(c, w, s["stride"], s["padding"])
        gw = _conv_dw(c, g, s["k"], s["stride"], s["padding"])
        return gg, gw


class _ConvDw:
    save_output = False

    @staticmethod
    def forward(saved, x, g, k, stride, padding):
        saved["stride"], saved["padding"] = stride, padding
        saved["k"] = k
        saved["in_spatial"] = x.shape[2:]
        return kernels.conv3d_weight_grad(x, g, k, stride, padding)

    @staticmethod
    def backward(node, c):
        x, g = node.inputs
        s = node.saved
        gx = _conv_dx(g, c, s["stride"], s["padding"], s["in_spatial"])
        gg = _conv_fwd(x, c, s["stride"], s["padding"])
        return gx, gg


def _conv_fwd(x, w, stride, padding):
    return apply_op(_ConvFwd, x, w, stride=stride, padding=padding)


def _conv_dx(g, w, stride, padding, out_spatial):
    return apply_op(_ConvDx, g, w, stride=stride, padding=padding,
                    out_spatial=tuple(out_spatial))


def _conv_dw(x, g, k, stride, padding):
    return apply_op(_ConvDw, x, g, k=k, stride=stride, padding=padding)


def _check_volume(x: DiffTensor, what: str):
    if x.ndim != 5:
        raise DimensionError(f"{what}: expected [N,C,D,H,W], got shape {x.shape}")


def _check_weight(w: DiffTensor, what: str):
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise DimensionError(f"{what}: expected cubic [A,B,k,k,k] weight, got {w.shape}")


def _add_channel_bias(y: DiffTensor, bias: DiffTensor) -> DiffTensor:
    if bias.ndim != 1 or bias.shape[0] != y.shape[1]:
        raise DimensionError(f"bias shape {bias.shape} != ({y.shape[1]},)")
    b = reshape(bias, (1, bias.shape[0], 1, 1, 1))
    return add(y, broadcast_to(b, y.shape))


def conv3d(x: DiffTensor, weight: DiffTensor, bias: DiffTensor | None = None,
           stride: int = 1, padding: int = 0) -> DiffTensor:
    """Strided cross-correlation of ``x[N,Cin,D,H,W]`` with
    ``weight[Cout,Cin,k,k,k]`` over zero-padded input."""
    _check_volume(x, "conv3d input")
    _check_weight(weight, "conv3d")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"conv3d: input channels {x.shape[1]} != weight Cin {weight.shape[1]}"
        )
    k = weight.shape[2]
    for d in x.shape[2:]:
        if k > d + 2 * padding:
            raise DimensionError(
                f"conv3d: kernel {k} exceeds padded extent {d + 2 * padding}"
            )
        if kernels.conv_output_extent(d, k, stride, padding) < 1:
            raise DimensionError(f"conv3d: non-positive output extent from input {d}")
    y = _conv_fwd(x, weight, stride, padding)
    if bias is not None:
        y = _add_channel_bias(y, bias)
    return y


def conv_transpose3d(x: DiffTensor, weight: DiffTensor, bias: DiffTensor | None = None,
                     stride: int = 1, padding: int = 0) -> DiffTensor:
    """Adjoint of ``conv3d``'s linear map: ``x[N,Cin,...]`` with
    ``weight[Cin,Cout,k,k,k]`` produces extents ``(D-1)*stride - 2p + k``."""
    _check_volume(x, "conv_transpose3d input")
    _check_weight(weight, "conv_transpose3d")
    if x.shape[1] != weight.shape[0]:
        raise DimensionError(
            f"conv_transpose3d: input channels {x.shape[1]} != weight Cin {weight.shape[0]}"
        )
    k = weight.shape[2]
    out_spatial = []
    for d in x.shape[2:]:
        od = kernels.conv_transpose_output_extent(d, k, stride, padding)
        if od < 1:
            raise DimensionError(
                f"conv_transpose3d: non-positive output extent from input {d}"
            )
        out_spatial.append(od)
    y = _conv_dx(x, weight, stride, padding, tuple(out_spatial))
    if bias is not None:
        y = _add_channel_bias(y, bias)
    return y


def conv3d_output_shape(in_spatial, k, stride, padding):
    return tuple(kernels.conv_output_extent(d, k, stride, padding) for d in in_spatial)


def conv_transpose3d_output_shape(in_spatial, k, stride, padding):
    return tuple(
        kernels.conv_transpose_output_extent(d, k, stride, padding) for d in in_spatial
    )
