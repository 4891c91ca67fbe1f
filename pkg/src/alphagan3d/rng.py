"""Seeded random streams.

Every stochastic component (sampling, augmentation, batching, gradient
penalties) draws from its own ``SeedStream`` so that runs are reproducible
and streams can be checkpointed and restored bit-exactly.
"""
from __future__ import annotations

import numpy as np


class SeedStream:
    """A stateful, serializable wrapper around ``numpy.random.Generator``."""

    def __init__(self, seed=None, _bit_generator=None):
        if _bit_generator is not None:
            self._gen = np.random.Generator(_bit_generator)
        else:
            self._gen = np.random.default_rng(seed)

    @classmethod
    def from_seed_sequence(cls, seq: np.random.SeedSequence) -> "SeedStream":
        return cls(_bit_generator=np.random.PCG64(seq))

    def spawn(self, n: int) -> list["SeedStream"]:
        """Derive ``n`` independent child streams (deterministic)."""
        return [SeedStream(_bit_generator=bg) for bg in self._gen.bit_generator.spawn(n)]

    def normal(self, shape, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.dtype(dtype))

    def uniform(self, low, high, shape=None, dtype=np.float32) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape).astype(dtype)

    def integers(self, low, high, shape=None):
        return self._gen.integers(low, high, size=shape)

    def shuffle(self, x) -> None:
        self._gen.shuffle(x)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def state(self) -> dict:
        """JSON-serializable generator state."""
        return _jsonify(self._gen.bit_generator.state)

    def set_state(self, state: dict) -> None:
        self._gen.bit_generator.state = state

    def clone(self) -> "SeedStream":
        child = SeedStream(0)
        child.set_state(self.state())
        return child


def _jsonify(obj):
    if isinstance(obj, dict):
        return {k: _jsonify(v) for k, v in obj.items()}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def named_streams(seed: int, names: tuple[str, ...]) -> dict[str, SeedStream]:
    """Deterministically derive one stream per name from a root seed."""
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: SeedStream.from_seed_sequence(seq) for name, seq in zip(names, children)}
