"""Input validation helpers used by the public estimators and functions."""

from __future__ import annotations

import numpy as np
from sklearn.utils import check_array

from .errors import InputError


def check_boxes(boxes, name: str = "boxes") -> np.ndarray:
    """Return ``boxes`` as a float64 ``(n, 4)`` array of valid corner boxes.

    A single box of shape ``(4,)`` is promoted to ``(1, 4)``. Raises
    :class:`InputError` for non-finite coordinates or ``x2 <= x1`` / ``y2 <= y1``.
    """
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.ndim == 1 and arr.shape[0] == 4:
        arr = arr[None, :]
    if arr.size == 0:
        return arr.reshape(0, 4)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise InputError(f"{name} must have shape (n, 4); got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite coordinates")
    bad = (arr[:, 2] <= arr[:, 0]) | (arr[:, 3] <= arr[:, 1])
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise InputError(f"{name}[{idx}] is degenerate: {arr[idx].tolist()}")
    return arr


def check_image(image, stride: int = 8) -> np.ndarray:
    """Validate a single grayscale image and return it as ``(1, H, W)`` float64."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] != 1:
        raise InputError(f"image must be (H, W) or (1, H, W); got {arr.shape}")
    h, w = arr.shape[1:]
    if h % stride or w % stride:
        raise InputError(f"image dims {h}x{w} must be divisible by {stride}")
    if not np.all(np.isfinite(arr)):
        raise InputError("image contains non-finite pixels")
    return arr


def check_features(features, min_samples: int = 1) -> np.ndarray:
    """Validate a 2-D feature matrix, one row per vector."""
    try:
        return check_array(
            features, dtype=np.float64, ensure_min_samples=min_samples
        )
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def check_positive(value, name: str, *, strict: bool = True) -> float:
    value = float(value)
    if not np.isfinite(value) or value < 0 or (strict and value == 0):
        bound = "> 0" if strict else ">= 0"
        raise InputError(f"{name} must be {bound}; got {value}")
    return value
