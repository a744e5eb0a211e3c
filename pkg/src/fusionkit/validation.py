"""Input validation helpers, in the spirit of ``sklearn.utils.check_array``.

Every public entry point funnels its array arguments through one of these so
that downstream numerics can assume float64, contiguous, correctly shaped
data.
"""

from __future__ import annotations

import numpy as np

from .exceptions import ParameterError


def check_depth(depth, name="depth", allow_zero=True) -> np.ndarray:
    """Return ``depth`` as a float64 (H, W) array of finite, non-negative values."""
    arr = np.asarray(depth, dtype=np.float64)
    if arr.ndim != 2:
        raise ParameterError(f"{name} must be a 2-D (H, W) array, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    if np.any(arr < 0):
        raise ParameterError(f"{name} contains negative depths")
    if not allow_zero and np.any(arr == 0):
        raise ParameterError(f"{name} contains zero (invalid) depths")
    return np.ascontiguousarray(arr)


def check_image(image, name="image") -> np.ndarray:
    """Return ``image`` as a float64 (H, W, 3) array with values in [0, 1].

    Grayscale (H, W) input is broadcast to three channels.
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ParameterError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite values")
    if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
        raise ParameterError(f"{name} intensities must lie in [0, 1]")
    return np.ascontiguousarray(arr)


def check_points(points, name="points") -> np.ndarray:
    """Return ``points`` as a float64 (N, 3) array of finite coordinates."""
    arr = np.asarray(points, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 3))
    if arr.ndim != 2 or arr.shape[1] < 3:
        raise ParameterError(f"{name} must have shape (N, 3), got {arr.shape}")
    arr = arr[:, :3]
    if not np.all(np.isfinite(arr)):
        raise ParameterError(f"{name} contains non-finite coordinates")
    return np.ascontiguousarray(arr)


def check_same_shape(a, b, names=("a", "b")):
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch: {names[0]} {a.shape} vs {names[1]} {b.shape}")


def check_positive(value, name, strict=True) -> float:
    value = float(value)
    if not np.isfinite(value) or (value <= 0 if strict else value < 0):
        bound = "> 0" if strict else ">= 0"
        raise ParameterError(f"{name} must be finite and {bound}, got {value}")
    return value
