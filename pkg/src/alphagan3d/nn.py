"""Parameterized layers: convolutions, dense maps, normalizations and
spectral normalization, built on the autodiff ops.

Layers draw their weights from a ``SeedStream`` at construction
(fan-in-scaled normal, zero biases), so building twice with the same
seed gives bit-identical parameters.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DiffTensor
from .errors import ContractError, DimensionError, DomainError
from .rng import SeedStream

DEFAULT_EPS = 1e-5
DEFAULT_BN_MOMENTUM = 0.1
DEFAULT_LEAKY_SLOPE = 0.2


def he_normal(stream: SeedStream, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Fan-in-scaled normal draw: std = sqrt(2 / fan_in)."""
    return (stream.normal(shape, dtype=np.float64) * np.sqrt(2.0 / fan_in)).astype(dtype)


class Layer:
    """Minimal layer protocol; stateless unless documented otherwise."""

    def forward(self, x: DiffTensor, training: bool = False) -> DiffTensor:
        raise NotImplementedError

    def parameters(self) -> dict[str, DiffTensor]:
        return {}

    def buffers(self) -> dict[str, np.ndarray]:
        return {}

    def load_buffers(self, values: dict[str, np.ndarray]) -> None:
        for name, value in values.items():
            self._set_buffer(name, value)

    def _set_buffer(self, name: str, value: np.ndarray) -> None:
        raise ContractError(f"{type(self).__name__} has no buffer {name!r}")

    def __call__(self, x, training=False):
        return self.forward(x, training=training)


class Dense(Layer):
    def __init__(self, in_features, out_features, stream, bias=True, dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = ad.tensor(
            he_normal(stream, (out_features, in_features), in_features, dtype),
            requires_grad=True)
        self.bias = (ad.tensor(np.zeros(out_features, dtype=dtype), requires_grad=True)
                     if bias else None)

    @property
    def fan_in(self):
        return self.in_features

    def forward(self, x, training=False):
        return self.forward_with_weight(x, self.weight)

    def forward_with_weight(self, x, weight):
        return ad.dense(x, weight, self.bias)

    def parameters(self):
        ps = {"weight": self.weight}
        if self.bias is not None:
            ps["bias"] = self.bias
        return ps


class Conv3d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride, padding,
                 stream, bias=True, dtype=np.float32):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel ** 3
        self.weight = ad.tensor(
            he_normal(stream, (out_channels, in_channels) + (kernel,) * 3, fan_in, dtype),
            requires_grad=True)
        self.bias = (ad.tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
                     if bias else None)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel ** 3

    def forward(self, x, training=False):
        return self.forward_with_weight(x, self.weight)

    def forward_with_weight(self, x, weight):
        return ad.conv3d(x, weight, self.bias, stride=self.stride, padding=self.padding)

    def output_spatial(self, in_spatial):
        return ad.conv3d_output_shape(in_spatial, self.kernel, self.stride, self.padding)

    def parameters(self):
        ps = {"weight": self.weight}
        if self.bias is not None:
            ps["bias"] = self.bias
        return ps


class ConvTranspose3d(Layer):
    def __init__(self, in_channels, out_channels, kernel, stride, padding,
                 stream, bias=True, dtype=np.float32):
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel, self.stride, self.padding = kernel, stride, padding
        fan_in = in_channels * kernel ** 3
        self.weight = ad.tensor(
            he_normal(stream, (in_channels, out_channels) + (kernel,) * 3, fan_in, dtype),
            requires_grad=True)
        self.bias = (ad.tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True)
                     if bias else None)

    @property
    def fan_in(self):
        return self.in_channels * self.kernel ** 3

    def forward(self, x, training=False):
        return self.forward_with_weight(x, self.weight)

    def forward_with_weight(self, x, weight):
        return ad.conv_transpose3d(x, weight, self.bias,
                                   stride=self.stride, padding=self.padding)

    def output_spatial(self, in_spatial):
        return ad.conv_transpose3d_output_shape(
            in_spatial, self.kernel, self.stride, self.padding)

    def parameters(self):
        ps = {"weight": self.weight}
        if self.bias is not None:
            ps["bias"] = self.bias
        return ps


WEIGHT_LAYER_TYPES = (Dense, Conv3d, ConvTranspose3d)


class SpectralState:
    """Power-iteration state: a persisted left singular vector estimate."""

    def __init__(self, u: np.ndarray, n_power_iterations: int = 1):
        self.u = u / np.linalg.norm(u)
        self.n_power_iterations = n_power_iterations


def spectral_normalize(weight: DiffTensor, state: SpectralState,
                       update: bool = True) -> DiffTensor:
    """Divide ``weight`` by its estimated largest singular value.

    The weight is viewed as a matrix (first extent x remaining extents);
    ``state.n_power_iterations`` power steps refine ``state.u``.  The
    estimated sigma is treated as a constant scale, so gradients flow
    through the division but not through the iteration.
    """
    w2d = weight.data.reshape(weight.shape[0], -1).astype(np.float64, copy=False)
    if not np.any(w2d):
        raise DomainError("spectral_normalize: zero weight matrix")
    u = state.u.astype(np.float64, copy=False)
    tiny = 1e-12
    v = None
    for _ in range(max(1, state.n_power_iterations)):
        v = w2d.T @ u
        v /= np.linalg.norm(v) + tiny
        u = w2d @ v
        u /= np.linalg.norm(u) + tiny
    sigma = float(u @ (w2d @ v))
    if sigma <= 0.0:
        raise DomainError("spectral_normalize: non-positive singular value estimate")
    if update:
        state.u = u.astype(state.u.dtype, copy=False)
    return ad.scale(weight, 1.0 / sigma)


class SpectralNorm(Layer):
    """Wraps a weight layer, normalizing its weight on every forward."""

    def __init__(self, layer: Layer, stream: SeedStream, n_power_iterations: int = 1):
        if not isinstance(layer, WEIGHT_LAYER_TYPES):
            raise ContractError("SpectralNorm wraps Dense/Conv3d/ConvTranspose3d")
        self.layer = layer
        rows = layer.weight.shape[0]
        self.state = SpectralState(stream.normal((rows,), dtype=np.float64),
                                   n_power_iterations)

    def forward(self, x, training=False):
        w = spectral_normalize(self.layer.weight, self.state, update=training)
        return self.layer.forward_with_weight(x, w)

    def effective_weight(self, n_power_iterations: int | None = None) -> np.ndarray:
        """The normalized weight as certified with extra power iterations."""
        state = SpectralState(self.state.u.copy(),
                              n_power_iterations or self.state.n_power_iterations)
        with ad.no_grad():
            return spectral_normalize(self.layer.weight, state, update=False).numpy()

    def parameters(self):
        return self.layer.parameters()

    def buffers(self):
        return {"sn_u": self.state.u}

    def _set_buffer(self, name, value):
        if name != "sn_u":
            raise ContractError(f"SpectralNorm has no buffer {name!r}")
        self.state.u = np.asarray(value, dtype=self.state.u.dtype)


class InstanceNorm3d(Layer):
    """Per-sample, per-channel normalization over the spatial axes."""

    def __init__(self, channels, stream=None, eps=DEFAULT_EPS, affine=True,
                 dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.affine = affine
        if affine:
            self.gamma = ad.tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            self.beta = ad.tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x, training=False):
        if x.ndim != 5:
            raise DimensionError(f"instance_norm3d expects [N,C,D,H,W], got {x.shape}")
        if int(np.prod(x.shape[2:])) < 2:
            raise DomainError("instance_norm3d needs at least 2 spatial voxels")
        axes = (2, 3, 4)
        mu = ad.mean(x, axes=axes, keepdims=True)
        xc = ad.sub(x, ad.broadcast_to(mu, x.shape))
        var = ad.mean(ad.square(xc), axes=axes, keepdims=True)
        std = ad.sqrt(ad.add_scalar(var, self.eps))
        xn = ad.div(xc, ad.broadcast_to(std, x.shape))
        if self.affine:
            cshape = (1, self.channels, 1, 1, 1)
            xn = ad.add(
                ad.mul(xn, ad.broadcast_to(ad.reshape(self.gamma, cshape), x.shape)),
                ad.broadcast_to(ad.reshape(self.beta, cshape), x.shape))
        return xn

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta} if self.affine else {}


class BatchNorm3d(Layer):
    """Per-channel normalization over batch and spatial axes with running
    statistics (biased variance throughout)."""

    def __init__(self, channels, stream=None, eps=DEFAULT_EPS,
                 momentum=DEFAULT_BN_MOMENTUM, affine=True, dtype=np.float32):
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.affine = affine
        self.running_mean = np.zeros(channels, dtype=np.float64)
        self.running_var = np.ones(channels, dtype=np.float64)
        self.num_batches = 0
        if affine:
            self.gamma = ad.tensor(np.ones(channels, dtype=dtype), requires_grad=True)
            self.beta = ad.tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x, training=False):
        if x.ndim != 5:
            raise DimensionError(f"batch_norm3d expects [N,C,D,H,W], got {x.shape}")
        axes = (0, 2, 3, 4)
        if training:
            count = x.shape[0] * int(np.prod(x.shape[2:]))
            if count < 2:
                raise DomainError("batch_norm3d training needs N*D*H*W >= 2")
            mu = ad.mean(x, axes=axes, keepdims=True)
            xc = ad.sub(x, ad.broadcast_to(mu, x.shape))
            var = ad.mean(ad.square(xc), axes=axes, keepdims=True)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu.numpy().reshape(-1)
            self.running_var = (1 - m) * self.running_var + m * var.numpy().reshape(-1)
            self.num_batches += 1
        else:
            if self.num_batches == 0:
                raise ContractError("batch_norm3d eval before any training update")
            cshape = (1, self.channels, 1, 1, 1)
            mu = ad.constant(self.running_mean.reshape(cshape).astype(x.dtype))
            var = ad.constant(self.running_var.reshape(cshape).astype(x.dtype))
            xc = ad.sub(x, ad.broadcast_to(mu, x.shape))
        std = ad.sqrt(ad.add_scalar(var, self.eps))
        xn = ad.div(xc, ad.broadcast_to(std, x.shape))
        if self.affine:
            cshape = (1, self.channels, 1, 1, 1)
            xn = ad.add(
                ad.mul(xn, ad.broadcast_to(ad.reshape(self.gamma, cshape), x.shape)),
                ad.broadcast_to(ad.reshape(self.beta, cshape), x.shape))
        return xn

    def parameters(self):
        return {"gamma": self.gamma, "beta": self.beta} if self.affine else {}

    def buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var,
                "num_batches": np.array([self.num_batches], dtype=np.int64)}

    def _set_buffer(self, name, value):
        if name == "running_mean":
            self.running_mean = np.asarray(value, dtype=np.float64)
        elif name == "running_var":
            self.running_var = np.asarray(value, dtype=np.float64)
        elif name == "num_batches":
            self.num_batches = int(np.asarray(value).reshape(-1)[0])
        else:
            raise ContractError(f"BatchNorm3d has no buffer {name!r}")


class Activation(Layer):
    def __init__(self, kind: str, slope: float = DEFAULT_LEAKY_SLOPE):
        self.kind = kind
        self.slope = slope

    def forward(self, x, training=False):
        return ad.activation(x, self.kind, self.slope)


class Reshape(Layer):
    """Reshape keeping the batch axis: [N, ...] -> [N, *tail]."""

    def __init__(self, tail_shape):
        self.tail_shape = tuple(tail_shape)

    def forward(self, x, training=False):
        return ad.reshape(x, (x.shape[0],) + self.tail_shape)


class Flatten(Layer):
    def forward(self, x, training=False):
        n = x.shape[0]
        return ad.reshape(x, (n, x.size // n))


def instance_norm3d(x, gamma=None, beta=None, eps=DEFAULT_EPS):
    """Functional form used by tests; affine applied when gamma/beta given."""
    layer = InstanceNorm3d.__new__(InstanceNorm3d)
    layer.channels = x.shape[1]
    layer.eps = eps
    layer.affine = gamma is not None
    if layer.affine:
        layer.gamma, layer.beta = gamma, beta
    return layer.forward(x)


def batch_norm3d(x, running_stats: BatchNorm3d, training: bool):
    return running_stats.forward(x, training=training)
