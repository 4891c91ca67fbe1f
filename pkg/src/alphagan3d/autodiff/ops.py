"""Differentiable primitive operations.

Each op provides ``forward`` (numpy in, numpy out) and ``backward``
(cotangent ``DiffTensor`` in, per-input cotangents out).  Backward rules
are written with the public op functions, so running them while
recording is enabled yields gradients that are themselves differentiable
(see ``tensor.backward(higher_order=True)``).

Kink conventions: ``abs``/``relu``/``leaky_relu`` use the right-hand
derivative at 0; these rules use constant masks, whose second derivative
is zero almost everywhere.
"""
from __future__ import annotations

import numpy as np

from ..errors import ContractError, DimensionError, DomainError
from .tensor import DiffTensor, apply_op, check_same_shape, constant


class Op:
    save_output = False


def _record(op, *inputs, **params):
    out = apply_op(op, *inputs, **params)
    if op.save_output and out._node is not None:
        out._node.saved["__out__"] = out
    return out


def _out_node(node) -> DiffTensor:
    return node.saved["__out__"]


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

class _Add(Op):
    @staticmethod
    def forward(saved, a, b):
        return a + b

    @staticmethod
    def backward(node, g):
        return g, g


class _AddScalar(Op):
    @staticmethod
    def forward(saved, a, c):
        saved["c"] = c
        return a + np.asarray(c, dtype=a.dtype)

    @staticmethod
    def backward(node, g):
        return (g,)


class _Mul(Op):
    @staticmethod
    def forward(saved, a, b):
        return a * b

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        return mul(g, b), mul(g, a)


class _Scale(Op):
    @staticmethod
    def forward(saved, a, c):
        saved["c"] = c
        return a * np.asarray(c, dtype=a.dtype)

    @staticmethod
    def backward(node, g):
        return (scale(g, node.saved["c"]),)


class _Div(Op):
    @staticmethod
    def forward(saved, a, b):
        return a / b

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        ga = div(g, b)
        gb = neg(div(mul(g, a), square(b)))
        return ga, gb


class _RDivScalar(Op):
    save_output = True

    @staticmethod
    def forward(saved, a, c):
        saved["c"] = c
        return np.asarray(c, dtype=a.dtype) / a

    @staticmethod
    def backward(node, g):
        (a,) = node.inputs
        return (neg(mul(g, div(_out_node(node), a))),)


class _Abs(Op):
    @staticmethod
    def forward(saved, a):
        saved["sign"] = np.where(a >= 0, 1, -1).astype(a.dtype)
        return np.abs(a)

    @staticmethod
    def backward(node, g):
        return (mul(g, constant(node.saved["sign"])),)


class _Square(Op):
    @staticmethod
    def forward(saved, a):
        return a * a

    @staticmethod
    def backward(node, g):
        (a,) = node.inputs
        return (mul(g, scale(a, 2.0)),)


class _Sqrt(Op):
    save_output = True

    @staticmethod
    def forward(saved, a):
        if np.any(a < 0):
            raise DomainError("sqrt of negative operand")
        return np.sqrt(a)

    @staticmethod
    def backward(node, g):
        return (div(g, scale(_out_node(node), 2.0)),)


class _Tanh(Op):
    save_output = True

    @staticmethod
    def forward(saved, a):
        return np.tanh(a)

    @staticmethod
    def backward(node, g):
        y = _out_node(node)
        return (mul(g, add_scalar(neg(square(y)), 1.0)),)


class _Relu(Op):
    @staticmethod
    def forward(saved, a):
        saved["mask"] = (a >= 0).astype(a.dtype)
        return np.where(a >= 0, a, 0)

    @staticmethod
    def backward(node, g):
        return (mul(g, constant(node.saved["mask"])),)


class _LeakyRelu(Op):
    @staticmethod
    def forward(saved, a, slope):
        saved["mask"] = np.where(a >= 0, 1.0, slope).astype(a.dtype)
        return np.where(a >= 0, a, a * a.dtype.type(slope))

    @staticmethod
    def backward(node, g):
        return (mul(g, constant(node.saved["mask"])),)


# ---------------------------------------------------------------------------
# shape and reduction
# ---------------------------------------------------------------------------

class _Sum(Op):
    @staticmethod
    def forward(saved, a, axes, keepdims):
        saved["in_shape"] = a.shape
        saved["axes"] = axes
        saved["keepdims"] = keepdims
        return a.sum(axis=axes, keepdims=keepdims)

    @staticmethod
    def backward(node, g):
        in_shape = node.saved["in_shape"]
        axes = node.saved["axes"]
        if not node.saved["keepdims"] and axes is not None:
            kept = list(in_shape)
            for ax in axes:
                kept[ax] = 1
            g = reshape(g, tuple(kept))
        elif not node.saved["keepdims"]:
            g = reshape(g, (1,) * len(in_shape))
        return (broadcast_to(g, in_shape),)


class _BroadcastTo(Op):
    @staticmethod
    def forward(saved, a, shape):
        saved["in_shape"] = a.shape
        return np.ascontiguousarray(np.broadcast_to(a, shape))

    @staticmethod
    def backward(node, g):
        in_shape = node.saved["in_shape"]
        out_shape = g.shape
        padded = (1,) * (len(out_shape) - len(in_shape)) + tuple(in_shape)
        axes = tuple(
            i for i in range(len(out_shape)) if padded[i] == 1 and out_shape[i] != 1
        )
        if axes:
            g = sum_(g, axes=axes, keepdims=True)
        return (reshape(g, in_shape),)


class _Reshape(Op):
    @staticmethod
    def forward(saved, a, shape):
        saved["in_shape"] = a.shape
        return np.ascontiguousarray(a).reshape(shape)

    @staticmethod
    def backward(node, g):
        return (reshape(g, node.saved["in_shape"]),)


class _Transpose2d(Op):
    @staticmethod
    def forward(saved, a):
        return np.ascontiguousarray(a.T)

    @staticmethod
    def backward(node, g):
        return (transpose2d(g),)


class _Matmul(Op):
    @staticmethod
    def forward(saved, a, b):
        return a @ b

    @staticmethod
    def backward(node, g):
        a, b = node.inputs
        return matmul(g, transpose2d(b)), matmul(transpose2d(a), g)


class _Narrow(Op):
    @staticmethod
    def forward(saved, a, axis, start, length):
        saved["axis"], saved["start"] = axis, start
        saved["full"] = a.shape[axis]
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + length)
        return np.ascontiguousarray(a[tuple(idx)])

    @staticmethod
    def backward(node, g):
        s = node.saved
        return (embed(g, s["axis"], s["start"], s["full"]),)


class _Embed(Op):
    @staticmethod
    def forward(saved, a, axis, start, full):
        saved["axis"], saved["start"] = axis, start
        saved["length"] = a.shape[axis]
        shape = list(a.shape)
        shape[axis] = full
        out = np.zeros(shape, dtype=a.dtype)
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + a.shape[axis])
        out[tuple(idx)] = a
        return out

    @staticmethod
    def backward(node, g):
        s = node.saved
        return (narrow(g, s["axis"], s["start"], s["length"]),)


# ---------------------------------------------------------------------------
# public functions
# ---------------------------------------------------------------------------

def _as_tensor_pair(a, b, what):
    check_same_shape(a, b, what)
    if a.dtype != b.dtype:
        raise DimensionError(f"{what}: dtype mismatch {a.dtype} vs {b.dtype}")


def add(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _as_tensor_pair(a, b, "add")
        return _record(_Add, a, b)
    return _record(_AddScalar, a, c=float(b))


def add_scalar(a: DiffTensor, c: float) -> DiffTensor:
    return _record(_AddScalar, a, c=float(c))


def sub(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _as_tensor_pair(a, b, "sub")
        return _record(_Add, a, neg(b))
    return _record(_AddScalar, a, c=-float(b))


def mul(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _as_tensor_pair(a, b, "mul")
        return _record(_Mul, a, b)
    return _record(_Scale, a, c=float(b))


def scale(a: DiffTensor, c: float) -> DiffTensor:
    return _record(_Scale, a, c=float(c))


def neg(a: DiffTensor) -> DiffTensor:
    return _record(_Scale, a, c=-1.0)


def div(a: DiffTensor, b) -> DiffTensor:
    if isinstance(b, DiffTensor):
        _as_tensor_pair(a, b, "div")
        return _record(_Div, a, b)
    return _record(_Scale, a, c=1.0 / float(b))


def rdiv(c: float, a: DiffTensor) -> DiffTensor:
    return _record(_RDivScalar, a, c=float(c))


def abs_(a: DiffTensor) -> DiffTensor:
    return _record(_Abs, a)


def square(a: DiffTensor) -> DiffTensor:
    return _record(_Square, a)


def sqrt(a: DiffTensor) -> DiffTensor:
    return _record(_Sqrt, a)


def tanh(a: DiffTensor) -> DiffTensor:
    return _record(_Tanh, a)


def relu(a: DiffTensor) -> DiffTensor:
    return _record(_Relu, a)


def leaky_relu(a: DiffTensor, slope: float = 0.2) -> DiffTensor:
    if not 0.0 < slope < 1.0:
        raise DomainError(f"leaky_relu slope must be in (0, 1), got {slope}")
    return _record(_LeakyRelu, a, slope=float(slope))


def _normalize_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    axes = tuple(ax % ndim if -ndim <= ax < ndim else ax for ax in axes)
    for ax in axes:
        if not 0 <= ax < ndim:
            raise DomainError(f"reduction axis {ax} out of range for ndim {ndim}")
    if len(set(axes)) != len(axes):
        raise DomainError(f"duplicate reduction axes {axes}")
    return axes


def sum_(a: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    axes = _normalize_axes(axes, a.ndim)
    if a.size == 0 or (axes is not None and len(axes) == 0):
        raise DomainError("empty reduction")
    return _record(_Sum, a, axes=axes, keepdims=keepdims)


def mean(a: DiffTensor, axes=None, keepdims: bool = False) -> DiffTensor:
    axes = _normalize_axes(axes, a.ndim)
    if axes is None:
        count = a.size
    else:
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    if count == 0 or (axes is not None and len(axes) == 0):
        raise DomainError("empty reduction")
    return scale(_record(_Sum, a, axes=axes, keepdims=keepdims), 1.0 / count)


def reduce(a: DiffTensor, kind: str, axes=None, keepdims: bool = False) -> DiffTensor:
    if kind == "sum":
        return sum_(a, axes=axes, keepdims=keepdims)
    if kind == "mean":
        return mean(a, axes=axes, keepdims=keepdims)
    raise ContractError(f"unknown reduction kind {kind!r}")


def broadcast_to(a: DiffTensor, shape) -> DiffTensor:
    shape = tuple(shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {a.shape} to {shape}") from exc
    return _record(_BroadcastTo, a, shape=shape)


def reshape(a: DiffTensor, shape) -> DiffTensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"cannot reshape {a.shape} (size {a.size}) to {shape}")
    return _record(_Reshape, a, shape=shape)


def transpose2d(a: DiffTensor) -> DiffTensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose2d needs a matrix, got shape {a.shape}")
    return _record(_Transpose2d, a)


def matmul(a: DiffTensor, b: DiffTensor) -> DiffTensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul dtype mismatch {a.dtype} vs {b.dtype}")
    return _record(_Matmul, a, b)


def narrow(a: DiffTensor, axis: int, start: int, length: int) -> DiffTensor:
    if not 0 <= axis < a.ndim:
        raise DimensionError(f"narrow axis {axis} out of range")
    if start < 0 or length < 1 or start + length > a.shape[axis]:
        raise DimensionError(
            f"narrow [{start}:{start + length}] outside axis extent {a.shape[axis]}"
        )
    return _record(_Narrow, a, axis=axis, start=start, length=length)


def embed(a: DiffTensor, axis: int, start: int, full: int) -> DiffTensor:
    if not 0 <= axis < a.ndim:
        raise DimensionError(f"embed axis {axis} out of range")
    if start < 0 or start + a.shape[axis] > full:
        raise DimensionError("embed slice outside target extent")
    return _record(_Embed, a, axis=axis, start=start, full=full)


def elementwise(a: DiffTensor, b=None, kind: str = "add") -> DiffTensor:
    """Generic elementwise dispatcher over the supported kinds."""
    binary = {"add": add, "sub": sub, "mul": mul}
    unary = {"abs": abs_, "square": square, "sqrt": sqrt}
    if kind in binary:
        if b is None:
            raise ContractError(f"elementwise {kind!r} needs two operands")
        return binary[kind](a, b)
    if kind == "scale":
        if isinstance(b, DiffTensor) or b is None:
            raise ContractError("elementwise scale needs a scalar operand")
        return scale(a, b)
    if kind in unary:
        if b is not None:
            raise ContractError(f"elementwise {kind!r} is unary")
        return unary[kind](a)
    raise ContractError(f"unknown elementwise kind {kind!r}")


def activation(x: DiffTensor, kind: str, slope: float = 0.2) -> DiffTensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    raise ContractError(f"unknown activation kind {kind!r}")


def dense(x: DiffTensor, weight: DiffTensor, bias: DiffTensor | None = None) -> DiffTensor:
    """Affine map ``x @ weight.T + bias`` for ``x[N,F]``, ``weight[O,F]``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"dense: input {x.shape} incompatible with weight {weight.shape}"
        )
    y = matmul(x, transpose2d(weight))
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"dense: bias shape {bias.shape} != ({weight.shape[0]},)")
        y = add(y, broadcast_to(reshape(bias, (1, bias.shape[0])), y.shape))
    return y


def l2_norm_per_sample(x: DiffTensor, eps: float = 1e-16) -> DiffTensor:
    """Per-sample L2 norm over all non-batch axes.

    A tiny ``eps`` inside the square root makes the gradient at an exactly
    zero sample the zero vector (and keeps the second-order path finite).
    """
    if x.ndim < 2:
        raise DimensionError("l2_norm_per_sample needs at least one non-batch axis")
    sq = sum_(square(x), axes=tuple(range(1, x.ndim)))
    return sqrt(add_scalar(sq, eps))


def sample(shape, stream, dist: str = "standard_normal", low: float = 0.0,
           high: float = 1.0, dtype=np.float32) -> DiffTensor:
    """Draw a non-differentiable tensor from a seeded stream."""
    if dist == "standard_normal":
        data = stream.normal(shape, dtype=dtype)
    elif dist == "uniform":
        data = stream.uniform(low, high, shape, dtype=dtype)
    else:
        raise ContractError(f"unknown distribution {dist!r}")
    return constant(data)


# ---------------------------------------------------------------------------
# operator sugar on DiffTensor
# ---------------------------------------------------------------------------

DiffTensor.__add__ = lambda self, other: add(self, other)
DiffTensor.__radd__ = lambda self, other: add(self, other)
DiffTensor.__sub__ = lambda self, other: sub(self, other)
DiffTensor.__rsub__ = lambda self, other: add_scalar(neg(self), float(other))
DiffTensor.__mul__ = lambda self, other: mul(self, other)
DiffTensor.__rmul__ = lambda self, other: mul(self, other)
DiffTensor.__truediv__ = lambda self, other: div(self, other)
DiffTensor.__rtruediv__ = lambda self, other: rdiv(float(other), self)
DiffTensor.__neg__ = lambda self: neg(self)
