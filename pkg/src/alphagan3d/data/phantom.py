"""Synthetic phantom volumes: a desk-scale stand-in dataset.

Each phantom is an ellipsoidal "brain" containing nested ellipsoids of
distinct intensities plus mild smooth noise, deterministic per seed,
with intensities in [0, 1] and an exactly zero background.
"""
from __future__ import annotations

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ContractError
from .nifti import Volume


def _ellipsoid_mask(grids, center, semi_axes):
    gx, gy, gz = grids
    cx, cy, cz = center
    ax, ay, az = semi_axes
    return (((gx - cx) / ax) ** 2 + ((gy - cy) / ay) ** 2
            + ((gz - cz) / az) ** 2) <= 1.0


def generate_phantom(seed: int, shape=(16, 16, 16), n_structures: int = 3,
                     voxel_size_mm=(0.375, 0.375, 0.5)) -> Volume:
    """One synthetic brain-like volume, deterministic per seed."""
    shape = tuple(int(s) for s in shape)
    if min(shape) < 8:
        raise ContractError(f"phantom needs extents >= 8, got {shape}")
    rng = np.random.default_rng(seed)
    grids = np.meshgrid(*(np.linspace(-1.0, 1.0, s) for s in shape), indexing="ij")

    center = rng.uniform(-0.06, 0.06, 3)
    semi = np.array([0.80, 0.74, 0.68]) * rng.uniform(0.92, 1.05, 3)
    brain = _ellipsoid_mask(grids, center, semi)

    vol = np.zeros(shape, dtype=np.float64)
    vol[brain] = rng.uniform(0.35, 0.5)

    # inner shell slightly darker, mimicking a cortical/ventricle contrast
    shell = _ellipsoid_mask(grids, center, semi * 0.82)
    vol[shell] = rng.uniform(0.5, 0.65)

    for _ in range(n_structures):
        off = center + rng.uniform(-0.35, 0.35, 3) * semi
        axes = rng.uniform(0.08, 0.3, 3) * semi
        mask = _ellipsoid_mask(grids, off, axes) & brain
        vol[mask] = rng.uniform(0.2, 0.95)

    noise = gaussian_filter(rng.standard_normal(shape), sigma=max(shape) / 10.0)
    peak = np.abs(noise).max()
    if peak > 0:
        vol[brain] += 0.05 * (noise[brain] / peak)

    vol = np.clip(vol, 0.0, 1.0)
    vol[~brain] = 0.0
    return Volume.create(vol.astype(np.float32), voxel_size_mm)


def generate_phantom_set(base_seed: int, count: int, shape=(16, 16, 16),
                         n_structures: int = 3) -> list[Volume]:
    return [generate_phantom(base_seed + i, shape, n_structures)
            for i in range(count)]
