"""Adam and AdamW parameter updates.

The functional forms (``adam_step``/``adamw_step``) mutate parameter and
state arrays in place; the ``Adam``/``AdamW`` classes wrap them per
parameter group for the training loop.  AdamW applies its weight decay
additively (``theta -= lr * wd * theta``), never through the moments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DiffTensor
from .errors import ContractError


@dataclass
class OptimizerConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01  # AdamW only


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_params(cls, params: dict[str, np.ndarray]) -> "OptimizerState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()},
                   step=0)


def _check_aligned(params, grads, state):
    for name, p in params.items():
        g = grads.get(name)
        if g is None or g.shape != p.shape:
            raise ContractError(
                f"gradient for {name!r} missing or misshaped "
                f"({None if g is None else g.shape} vs {p.shape})")
        if state.m[name].shape != p.shape or state.v[name].shape != p.shape:
            raise ContractError(f"optimizer state for {name!r} misshaped")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, config: OptimizerConfig) -> None:
    """Standard bias-corrected Adam update, in place."""
    _check_aligned(params, grads, state)
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + config.eps)
        p -= (config.learning_rate * update).astype(p.dtype, copy=False)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, config: OptimizerConfig) -> None:
    """Adam update plus decoupled weight decay."""
    decay = {name: (config.learning_rate * config.weight_decay) * p
             for name, p in params.items()}
    adam_step(params, grads, state, config)
    for name, p in params.items():
        p -= decay[name].astype(p.dtype, copy=False)


class Adam:
    """Adam over one named parameter group of DiffTensors."""

    kind = "adam"
    _step_fn = staticmethod(adam_step)

    def __init__(self, params: dict[str, DiffTensor], config: OptimizerConfig | None = None):
        self.params = dict(params)
        self.config = config or OptimizerConfig()
        self.state = OptimizerState.for_params(
            {k: p.numpy() for k, p in self.params.items()})

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            if p.grad is None:
                grads[name] = np.zeros_like(p.numpy())
            else:
                grads[name] = p.grad.numpy()
        type(self)._step_fn(
            {k: p.numpy() for k, p in self.params.items()}, grads,
            self.state, self.config)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class AdamW(Adam):
    kind = "adamw"
    _step_fn = staticmethod(adamw_step)


OPTIMIZER_KINDS = {"adam": Adam, "adamw": AdamW}


def make_optimizer(kind: str, params: dict[str, DiffTensor],
                   config: OptimizerConfig | None = None) -> Adam:
    try:
        cls = OPTIMIZER_KINDS[kind]
    except KeyError:
        raise ContractError(f"unknown optimizer kind {kind!r}") from None
    return cls(params, config)
