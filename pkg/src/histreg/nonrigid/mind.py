"""Modality independent neighbourhood descriptor (self-similarity maps)."""

from __future__ import annotations

import numpy as np

from .. import kernels
from ..imgcore import as_image

__all__ = ["MIND_OFFSETS", "MIN_SIZE", "mind_descriptor", "descriptor_ssd"]

MIND_OFFSETS = kernels.MIND_OFFSETS
MIN_SIZE = 16
VARIANCE_FLOOR = 1e-6


def _patch_taps(radius: int) -> np.ndarray:
    sigma = 0.5 * radius
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def mind_descriptor(img, patch_radius: int = 1, sigma_mind: float = VARIANCE_FLOOR) -> np.ndarray:
    """Six-channel descriptor, shape ``(6, H, W)``, values in (0, 1].

    Channel ``k`` is ``exp(-D_k / V)`` where ``D_k`` is the Gaussian-weighted
    patch distance to the neighbour at ``MIND_OFFSETS[k]`` and ``V`` the
    per-pixel mean of the six distances, floored at ``sigma_mind``.  Each
    pixel is rescaled so its largest channel is exactly 1.
    """
    img = as_image(img)
    h, w = img.shape
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ValueError(f"MIND needs at least {MIN_SIZE}x{MIN_SIZE} pixels, got {w}x{h}")
    if patch_radius < 1:
        raise ValueError("patch_radius must be >= 1")
    if not sigma_mind > 0:
        raise ValueError("sigma_mind must be positive")
    d = kernels.mind_distances(img, MIND_OFFSETS, _patch_taps(int(patch_radius)))
    v = np.maximum(d.mean(axis=0), sigma_mind)
    # dividing by the per-pixel maximum of exp(-d/v) is a shift by min(d)
    return np.exp(-(d - d.min(axis=0)) / v)


def descriptor_ssd(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-pixel sum over channels of squared descriptor differences."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    diff = a - b
    return np.einsum("kij,kij->ij", diff, diff)
