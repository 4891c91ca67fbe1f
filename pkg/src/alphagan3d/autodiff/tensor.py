"""Reverse-mode automatic differentiation over dense numpy buffers.

A ``DiffTensor`` wraps a float32/float64 array.  Applying an operation
records a node linking the output to its inputs; ``backward`` linearizes
the recorded nodes into a ``GradTape`` and walks it once in reverse
execution order, accumulating cotangents.

Every derivative rule is itself written in terms of recorded operations.
A plain backward pass runs those rules inside a ``no_grad`` block, so
nothing new is recorded; with ``higher_order=True`` the rules record
normally and the resulting gradients are differentiable nodes, which is
what the gradient-penalty losses differentiate a second time.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from ..errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class DiffTensor:
    """Dense N-d float tensor participating in a differentiation graph."""

    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def is_leaf(self) -> bool:
        return self._node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "DiffTensor":
        return DiffTensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return (
            f"DiffTensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, "
            f"requires_grad={self.requires_grad})"
        )

    # arithmetic dunders are attached by alphagan3d.autodiff.ops at import


def tensor(data, requires_grad=False, dtype=None) -> DiffTensor:
    return DiffTensor(data, requires_grad=requires_grad, dtype=dtype)


def constant(data, dtype=None) -> DiffTensor:
    return DiffTensor(data, requires_grad=False, dtype=dtype)


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> DiffTensor:
    return DiffTensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> DiffTensor:
    return DiffTensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# recording
# ---------------------------------------------------------------------------

_GRAD_ENABLED = [True]


def grad_enabled() -> bool:
    return _GRAD_ENABLED[0]


@contextmanager
def no_grad():
    _GRAD_ENABLED.append(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


class _Node:
    """One executed operation: the op, its input tensors, saved values."""

    __slots__ = ("op", "inputs", "saved")

    def __init__(self, op, inputs, saved):
        self.op = op
        self.inputs = inputs
        self.saved = saved


def apply_op(op, *inputs, **params) -> DiffTensor:
    """Run ``op.forward`` and record a node when recording is active."""
    saved = {}
    out_data = op.forward(saved, *[t.data for t in inputs], **params)
    needs = grad_enabled() and any(t.requires_grad for t in inputs)
    out = DiffTensor(out_data, requires_grad=needs)
    if needs:
        out._node = _Node(op, inputs, saved)
    return out


class GradTape:
    """Linearized execution record used by one backward traversal."""

    __slots__ = ("order",)

    def __init__(self, order):
        self.order = order  # tensors in execution (topological) order

    @classmethod
    def trace(cls, root: DiffTensor) -> "GradTape":
        # Iterative post-order DFS; ladder networks make deep graphs.
        order, visited = [], set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                for parent in t._node.inputs:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(order)


def _accumulate(cot: dict, t: DiffTensor, g: DiffTensor) -> None:
    prev = cot.get(id(t))
    if prev is None:
        cot[id(t)] = g
    else:
        from . import ops  # deferred: ops imports this module

        cot[id(t)] = ops.add(prev, g)


def _walk(root: DiffTensor, seed: DiffTensor, higher_order: bool):
    """Reverse the tape once; return {id(tensor): cotangent} for leaves."""
    tape = GradTape.trace(root)
    cot = {id(root): seed}
    leaf_grads = {}
    ctx = _keep_grad() if higher_order else no_grad()
    with ctx:
        for t in reversed(tape.order):
            g = cot.pop(id(t), None)
            if g is None:
                continue
            if t._node is None:
                leaf_grads[id(t)] = g
                continue
            node = t._node
            in_grads = node.op.backward(node, g)
            for parent, pg in zip(node.inputs, in_grads):
                if pg is not None and parent.requires_grad:
                    _accumulate(cot, parent, pg)
    return leaf_grads, tape


@contextmanager
def _keep_grad():
    _GRAD_ENABLED.append(True)
    try:
        yield
    finally:
        _GRAD_ENABLED.pop()


def backward(root: DiffTensor, higher_order: bool = False) -> None:
    """Accumulate d(root)/d(leaf) into ``.grad`` of every leaf that
    requires gradients.

    ``root`` must be a scalar.  With ``higher_order=True`` the deposited
    gradients are themselves graph nodes and can be differentiated again.
    """
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward on a detached graph (root does not require grad)")
    seed = DiffTensor(np.ones(root.shape, dtype=root.dtype))
    leaf_grads, tape = _walk(root, seed, higher_order)
    for t in tape.order:
        g = leaf_grads.get(id(t))
        if g is None:
            continue
        if t.grad is None:
            t.grad = g
        else:
            with (no_grad() if not higher_order else _keep_grad()):
                from . import ops

                t.grad = ops.add(t.grad, g)


def grad(root: DiffTensor, wrt, higher_order: bool = False) -> list:
    """Return d(root)/d(t) for each tensor in ``wrt`` without touching
    ``.grad`` of anything else (used by the gradient penalties)."""
    if root.size != 1:
        raise ContractError(f"grad root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("grad on a detached graph (root does not require grad)")
    seed = DiffTensor(np.ones(root.shape, dtype=root.dtype))
    leaf_grads, _ = _walk(root, seed, higher_order)
    out = []
    for t in wrt:
        g = leaf_grads.get(id(t))
        if g is None:
            if not t.requires_grad:
                raise ContractError("grad target does not require grad")
            g = DiffTensor(np.zeros(t.shape, dtype=t.dtype))
        out.append(g)
    return out


def check_same_shape(a: DiffTensor, b: DiffTensor, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
