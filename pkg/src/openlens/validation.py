"""Input validation helpers shared across the package.

All helpers return the validated array (as float64, C-contiguous) or raise
one of the exceptions from :mod:`openlens.exceptions`. They are deliberately
small so estimator methods and free functions can compose them.
"""

from __future__ import annotations

import numpy as np

from .exceptions import InvariantViolation, ShapeMismatch


def as_float_array(values, name: str = "array") -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InvariantViolation(f"{name}: non-finite values")
    return np.ascontiguousarray(arr)


def check_pixel_array(values, name: str = "pixels") -> np.ndarray:
    """Validate an H x W x C intensity array with values in [0, 1]."""
    arr = as_float_array(values, name)
    if arr.ndim != 3:
        raise InvariantViolation(f"{name}: expected 3 dimensions, got {arr.ndim}")
    if min(arr.shape) < 1:
        raise InvariantViolation(f"{name}: empty dimension in shape {arr.shape}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvariantViolation(f"{name}: pixel range outside [0, 1]")
    return arr


def check_mask_array(values, name: str = "mask") -> np.ndarray:
    """Validate an H x W mask array with values in [0, 1]."""
    arr = as_float_array(values, name)
    if arr.ndim != 2:
        raise InvariantViolation(f"{name}: expected 2 dimensions, got {arr.ndim}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvariantViolation(f"{name}: mask range outside [0, 1]")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "arrays") -> None:
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: {a.shape} vs {b.shape}")


def check_spatial_match(pixels: np.ndarray, mask: np.ndarray) -> None:
    if pixels.shape[:2] != mask.shape:
        raise ShapeMismatch(
            f"mask shape {mask.shape} does not match image spatial shape "
            f"{pixels.shape[:2]}"
        )


def freeze(arr: np.ndarray) -> np.ndarray:
    """Return a read-only view so shared core types stay immutable."""
    out = arr.copy()
    out.setflags(write=False)
    return out
