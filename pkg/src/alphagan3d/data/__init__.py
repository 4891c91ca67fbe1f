"""NIfTI I/O, preprocessing, augmentation and phantom generation."""

from .nifti import Volume, read_nifti, write_nifti, UnsupportedDataTypeError
from .phantom import generate_phantom, generate_phantom_set
from .pipeline import (
    AugmentationPolicy,
    augment,
    flip_volume,
    postprocess_generated,
    preprocess,
    rotate_volume,
    translate_volume,
    zoom_volume,
)

__all__ = [
    "Volume", "read_nifti", "write_nifti", "UnsupportedDataTypeError",
    "generate_phantom", "generate_phantom_set",
    "AugmentationPolicy", "augment", "flip_volume", "postprocess_generated",
    "preprocess", "rotate_volume", "translate_volume", "zoom_volume",
]
