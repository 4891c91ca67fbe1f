"""Preprocessing, augmentation and the generation post-processing path.

Preprocessing pads each axis symmetrically with zeros up to a cube and
min-max maps intensities to [-1, 1]; post-processing inverts both steps
and re-attaches reference metadata so generated scans can be written with
the original header/affine.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from ..errors import ContractError, DomainError
from ..rng import SeedStream
from .nifti import Volume


def _as_grid(volume) -> np.ndarray:
    if isinstance(volume, Volume):
        return volume.voxels
    return np.asarray(volume)


def preprocess(volume, target: int | None = None) -> np.ndarray:
    """Zero-pad to a cube (symmetric per axis) then min-max map to [-1, 1].

    The min-max window is taken over the padded grid, so padding slices map
    exactly to -1 for non-negative scans.
    """
    arr = _as_grid(volume).astype(np.float64)
    if not np.all(np.isfinite(arr)):
        raise DomainError("preprocess: non-finite voxels")
    if target is None:
        target = int(max(arr.shape))
    pads = []
    for d in arr.shape:
        if d > target:
            raise DomainError(f"preprocess: extent {d} exceeds target {target}")
        left = (target - d) // 2
        pads.append((left, target - d - left))
    arr = np.pad(arr, pads)
    lo, hi = float(arr.min()), float(arr.max())
    if hi <= lo:
        raise DomainError("preprocess: constant volume (max == min)")
    out = 2.0 * (arr - lo) / (hi - lo) - 1.0
    return out.astype(np.float32)


def postprocess_generated(tensor, reference: Volume) -> Volume:
    """Invert the preprocessing of a generated [-1, 1] cube: center-crop
    back to the reference grid, rescale to the reference intensity window
    (including the zero padding floor), attach reference metadata."""
    arr = np.asarray(tensor, dtype=np.float64)
    arr = arr.reshape(arr.shape[-3:])  # tolerate [1,D,H,W] / [1,1,D,H,W]
    ref_shape = reference.voxels.shape
    for cur, ref in zip(arr.shape, ref_shape):
        if ref > cur:
            raise ContractError(
                f"reference dims {ref_shape} larger than tensor {arr.shape}")
    slices = tuple(slice((cur - ref) // 2, (cur - ref) // 2 + ref)
                   for cur, ref in zip(arr.shape, ref_shape))
    arr = arr[slices]
    lo = min(float(reference.voxels.min()), 0.0)
    hi = max(float(reference.voxels.max()), 0.0)
    out = (arr + 1.0) / 2.0 * (hi - lo) + lo
    return Volume(voxels=out.astype(np.float32),
                  header_bytes=reference.header_bytes,
                  affine=reference.affine.copy(),
                  voxel_size_mm=reference.voxel_size_mm)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

TRANSFORM_NAMES = ("zoom", "rotation", "gaussian_noise", "flip", "translation",
                   "intensity_scale")


@dataclass
class AugmentationPolicy:
    """Which transforms run, their parameter ranges, and the per-transform
    application probability."""

    enabled: frozenset = frozenset(TRANSFORM_NAMES)
    probability: float = 0.5
    zoom_range: tuple = (0.9, 1.1)
    rotation_max_deg: float = 10.0
    noise_sigma_max: float = 0.05   # fraction of the intensity range
    flip_axis: int = 0              # left-right by default
    translation_max: int = 4        # voxels per axis
    intensity_range: tuple = (0.9, 1.1)

    def __post_init__(self):
        unknown = set(self.enabled) - set(TRANSFORM_NAMES)
        if unknown:
            raise ContractError(f"unknown augmentations {sorted(unknown)}")
        if not 0.0 <= self.probability <= 1.0:
            raise ContractError(f"probability {self.probability} outside [0, 1]")

    @classmethod
    def none(cls) -> "AugmentationPolicy":
        return cls(enabled=frozenset())

    @classmethod
    def flip_only(cls, probability: float = 0.5) -> "AugmentationPolicy":
        return cls(enabled=frozenset({"flip"}), probability=probability)

    @classmethod
    def all_transforms(cls, probability: float = 0.5) -> "AugmentationPolicy":
        return cls(probability=probability)


def zoom_volume(arr: np.ndarray, factor: float) -> np.ndarray:
    """Trilinear zoom about the center, shape preserved, zero fill."""
    center = (np.array(arr.shape) - 1) / 2.0
    matrix = np.eye(3) / factor
    offset = center - matrix @ center
    return ndimage.affine_transform(arr, matrix, offset=offset, order=1,
                                    mode="constant", cval=0.0)


def rotate_volume(arr: np.ndarray, angle_deg: float) -> np.ndarray:
    """Trilinear rotation about the inferior-superior (third) axis."""
    return ndimage.rotate(arr, angle_deg, axes=(0, 1), reshape=False, order=1,
                          mode="constant", cval=0.0)


def translate_volume(arr: np.ndarray, offsets) -> np.ndarray:
    return ndimage.shift(arr, shift=offsets, order=1, mode="constant", cval=0.0)


def flip_volume(arr: np.ndarray, axis: int) -> np.ndarray:
    return np.flip(arr, axis=axis).copy()


def augment(tensor: np.ndarray, policy: AugmentationPolicy,
            stream: SeedStream) -> np.ndarray:
    """Apply each enabled transform with its probability; output shape is
    unchanged and exposed regions are zero-filled."""
    arr = np.asarray(tensor, dtype=np.float32)
    shape = arr.shape

    def fires():
        return float(stream.uniform(0.0, 1.0, (), dtype=np.float64)) < policy.probability

    if "zoom" in policy.enabled and fires():
        factor = float(stream.uniform(*policy.zoom_range, (), dtype=np.float64))
        arr = zoom_volume(arr, factor)
    if "rotation" in policy.enabled and fires():
        angle = float(stream.uniform(-policy.rotation_max_deg,
                                     policy.rotation_max_deg, (), dtype=np.float64))
        arr = rotate_volume(arr, angle)
    if "gaussian_noise" in policy.enabled and fires():
        spread = float(arr.max() - arr.min())
        sigma = float(stream.uniform(0.0, policy.noise_sigma_max, (),
                                     dtype=np.float64)) * spread
        arr = arr + sigma * stream.normal(shape, dtype=np.float64)
    if "flip" in policy.enabled and fires():
        arr = flip_volume(arr, policy.flip_axis)
    if "translation" in policy.enabled and fires():
        offsets = stream.integers(-policy.translation_max,
                                  policy.translation_max + 1, (3,))
        arr = translate_volume(arr, offsets)
    if "intensity_scale" in policy.enabled and fires():
        arr = arr * float(stream.uniform(*policy.intensity_range, (),
                                         dtype=np.float64))
    out = np.asarray(arr, dtype=np.float32)
    assert out.shape == shape
    return out
