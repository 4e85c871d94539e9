"""Macenko H&E stain normalization.

The stain plane is fitted to the optical-density cloud of tissue pixels, the
two extreme stain directions are read off as robust angle percentiles inside
that plane, and per-pixel concentrations are rescaled so their 99th
percentile matches a reference basis before recomposing the image.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from stainbridge.errors import InputValidationError, NormalizationSkipped

# widely used reference H&E stain vectors (columns: haematoxylin, eosin) and
# their 99th-percentile concentrations
REFERENCE_STAINS = np.array([
    [0.5626, 0.2159],
    [0.7201, 0.8012],
    [0.4062, 0.5581],
])
REFERENCE_MAX_CONCENTRATIONS = np.array([1.9705, 1.0308])


def _unit_columns(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=0, keepdims=True)


@dataclass
class StainBasis:
    stain_vectors: np.ndarray  # (3, 2), unit columns: haematoxylin, eosin
    max_concentrations: np.ndarray = field(default_factory=lambda: REFERENCE_MAX_CONCENTRATIONS.copy())

    def __post_init__(self):
        v = np.asarray(self.stain_vectors, dtype=np.float64)
        if v.shape != (3, 2):
            raise InputValidationError(f"stain_vectors must be (3, 2), got {v.shape}")
        self.stain_vectors = _unit_columns(v)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64)
        if np.linalg.matrix_rank(self.stain_vectors, tol=1e-6) < 2:
            raise InputValidationError("stain vectors are linearly dependent")

    @classmethod
    def reference(cls) -> "StainBasis":
        return cls(REFERENCE_STAINS.copy(), REFERENCE_MAX_CONCENTRATIONS.copy())


def optical_density(rgb: np.ndarray, background: float = 255.0) -> np.ndarray:
    """Beer-Lambert optical density, ``-ln(I / I0)``, with I clamped to >= 1."""
    return -np.log(np.maximum(rgb.astype(np.float64), 1.0) / background)


def tissue_mask(od: np.ndarray, threshold: float = 0.15) -> np.ndarray:
    """Pixels whose optical density reaches ``threshold`` in every channel."""
    return np.all(od >= threshold, axis=-1)


def concentrations(od_flat: np.ndarray, stains: np.ndarray) -> np.ndarray:
    """Least-squares stain concentrations, (N, 3) OD -> (2, N)."""
    return np.linalg.lstsq(stains, od_flat.T, rcond=None)[0]


def estimate_stain_basis(rgb: np.ndarray, od_threshold: float = 0.15, alpha: float = 1.0,
                         min_tissue_fraction: float = 0.01, background: float = 255.0) -> StainBasis:
    """Per-image Macenko stain vectors and 99th-percentile concentrations.

    Raises :class:`NormalizationSkipped` if fewer than ``min_tissue_fraction``
    of the pixels are tissue.
    """
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputValidationError(f"expected an (H, W, 3) image, got {rgb.shape}")
    od = optical_density(rgb, background).reshape(-1, 3)
    keep = tissue_mask(od, od_threshold)
    frac = float(keep.mean())
    if frac < min_tissue_fraction or keep.sum() < 3:
        raise NormalizationSkipped(frac, min_tissue_fraction)
    od_hat = od[keep]

    # plane through the origin spanned by the two leading right singular vectors
    _, _, vt = np.linalg.svd(od_hat, full_matrices=False)
    plane = vt[:2].T
    plane *= np.where(plane.sum(axis=0) < 0, -1.0, 1.0)

    proj = od_hat @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha, 100.0 - alpha])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    # haematoxylin absorbs red more strongly than eosin does
    stains = np.stack([v_lo, v_hi], axis=1) if v_lo[0] > v_hi[0] else np.stack([v_hi, v_lo], axis=1)
    stains = _unit_columns(stains)
    stains *= np.where(stains.sum(axis=0) < 0, -1.0, 1.0)

    max_c = np.percentile(concentrations(od, stains), 99, axis=1)
    if np.any(max_c <= 0):
        raise NormalizationSkipped(frac, min_tissue_fraction)
    return StainBasis(stains, max_c)


def macenko_normalize(rgb: np.ndarray, reference: StainBasis | None = None, *,
                      od_threshold: float = 0.15, alpha: float = 1.0,
                      min_tissue_fraction: float = 0.01, background: float = 255.0) -> np.ndarray:
    """Map an 8-bit H&E patch onto the ``reference`` stain basis.

    Raises :class:`NormalizationSkipped` for patches without enough tissue;
    the caller decides whether to keep the original or drop the patch.
    """
    reference = reference or StainBasis.reference()
    source = estimate_stain_basis(rgb, od_threshold, alpha, min_tissue_fraction, background)
    od = optical_density(rgb, background).reshape(-1, 3)
    c = concentrations(od, source.stain_vectors)
    c *= (reference.max_concentrations / source.max_concentrations)[:, None]
    out = background * np.exp(-(reference.stain_vectors @ c))
    return np.clip(np.round(out.T), 0, 255).astype(np.uint8).reshape(rgb.shape)


def compose_from_stains(conc: np.ndarray, basis: StainBasis, background: float = 255.0) -> np.ndarray:
    """Render (H, W, 2) concentrations through ``basis`` as an 8-bit RGB image."""
    h, w, _ = conc.shape
    od = conc.reshape(-1, 2) @ basis.stain_vectors.T
    out = background * np.exp(-od)
    return np.clip(np.round(out), 0, 255).astype(np.uint8).reshape(h, w, 3)
