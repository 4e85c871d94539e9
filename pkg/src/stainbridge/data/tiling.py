from __future__ import annotations

import numpy as np

from stainbridge.errors import InputValidationError


def trim_margin(image: np.ndarray, margin: int = 50) -> np.ndarray:
    """Drop ``margin`` pixels from every edge of an (H, W, ...) raster."""
    if margin < 0:
        raise InputValidationError(f"margin must be >= 0, got {margin}")
    h, w = image.shape[:2]
    if h <= 2 * margin or w <= 2 * margin:
        raise InputValidationError(f"image {h}x{w} too small for a {margin}px margin")
    if margin == 0:
        return image
    return image[margin:h - margin, margin:w - margin]


def tile_offsets(length: int, size: int, overlap_fraction: float) -> list[int]:
    """Start offsets along one axis: a regular grid plus a far-edge flush tile."""
    if length < size:
        raise InputValidationError(f"axis length {length} smaller than patch size {size}")
    if not 0.0 <= overlap_fraction < 1.0:
        raise InputValidationError(f"overlap_fraction must be in [0, 1), got {overlap_fraction}")
    stride = max(1, int(round(size * (1.0 - overlap_fraction))))
    offsets = list(range(0, length - size + 1, stride))
    if offsets[-1] != length - size:
        offsets.append(length - size)
    return offsets


def crop_patches(image: np.ndarray, size: int = 1024, overlap_fraction: float = 0.5):
    """Overlapping square tiles in row-major order.

    Returns a list of ``((row, col), patch)``; patches are views into ``image``.
    """
    h, w = image.shape[:2]
    if h < size or w < size:
        raise InputValidationError(f"image {h}x{w} smaller than patch size {size}")
    rows = tile_offsets(h, size, overlap_fraction)
    cols = tile_offsets(w, size, overlap_fraction)
    return [((r, c), image[r:r + size, c:c + size]) for r in rows for c in cols]
