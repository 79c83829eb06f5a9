"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DataError, ShapeError


def check_images(X, factor: int = 1) -> np.ndarray:
    """Stack of grayscale images as float64 ``(n, H, W)`` with values in [0, 1]."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected images of shape (n, H, W), got {arr.shape}")
    if arr.shape[0] == 0:
        raise DataError("no images given")
    if not np.all(np.isfinite(arr)):
        raise DataError("images contain non-finite values")
    if arr.min() < 0 or arr.max() > 1:
        raise DataError("image values must lie in [0, 1]")
    if arr.shape[1] % factor or arr.shape[2] % factor:
        raise ShapeError(f"image extents {arr.shape[1:]} not divisible by {factor}")
    return arr


def check_dots(y, n: int) -> list:
    """List of ``n`` dot arrays, each ``(k, 2)`` of (row, col) coordinates."""
    if y is None:
        raise DataError("dot annotations are required")
    dots = [np.asarray(d, dtype=np.float64).reshape(-1, 2) for d in y]
    if len(dots) != n:
        raise ShapeError(f"{len(dots)} annotation lists for {n} images")
    return dots


def counts_from(y: Sequence) -> np.ndarray:
    """True counts from either dot lists or plain numbers."""
    out = []
    for item in y:
        a = np.asarray(item, dtype=np.float64)
        out.append(float(a) if a.ndim == 0 else float(a.reshape(-1, 2).shape[0]))
    return np.array(out)
