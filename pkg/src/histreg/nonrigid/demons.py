"""Compositive symmetric Demons on intensities or on MIND descriptors."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import ndimage

from .. import kernels
from ..imgcore import (DisplacementField, as_image, compose_fields, resample_field,
                       warp_image, warp_validity)
from ..preprocess import gaussian_smooth, resize_by_scale
from .mind import MIN_SIZE, mind_descriptor

__all__ = ["DemonsParams", "demons_register", "mind_demons_register"]

_SQUARE = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class DemonsParams:
    levels: int = 4
    iters_per_level: int = 50
    sigma_fluid: float = 2.0
    sigma_diffusion: float = 1.0
    step_scale: float = 1.0
    normalization_floor: float = 1e-8
    alpha: float = 1.0
    max_step: float = 2.0
    # stop a level once the mean update length falls below this (pixels)
    tolerance: float = 1e-3
    # ... or once the residual energy has not dropped by this fraction of
    # its best value within ``patience`` iterations
    energy_tolerance: float = 0.02
    patience: int = 5

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        for name in ("sigma_fluid", "sigma_diffusion", "normalization_floor", "alpha", "tolerance",
                     "energy_tolerance"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.step_scale <= 0 or self.max_step <= 0:
            raise ValueError("step_scale and max_step must be positive")


def _channels_intensity(img):
    return img[None]


def _channels_mind(img):
    return mind_descriptor(img)


def _gradients(ch):
    gy, gx = np.gradient(ch, axis=(1, 2))
    return np.ascontiguousarray(gx), np.ascontiguousarray(gy)


def _smooth_field(field: DisplacementField, sigma: float) -> DisplacementField:
    if sigma <= 0:
        return field
    return DisplacementField(gaussian_smooth(field.u, sigma), gaussian_smooth(field.v, sigma))


def _level_factors(shape, levels, min_side):
    out = []
    for k in range(levels):
        f = 2.0 ** k
        if k and min(shape) / f < min_side:
            break
        out.append(f)
    return out[::-1]


def _run(fixed, moving, init: DisplacementField, p: DemonsParams,
         channels: Callable[[np.ndarray], np.ndarray], min_side: int, reach: int) -> DisplacementField:
    # ``reach``: how far (pixels) a channel value and its gradient look; pixels
    # that close to zero-filled samples would see a spurious edge
    fixed = as_image(fixed)
    moving = as_image(moving)
    if fixed.shape != moving.shape or init.shape != fixed.shape:
        raise ValueError(f"dimension mismatch: fixed {fixed.shape}, moving {moving.shape}, field {init.shape}")
    resid = None  # total minus init, carried between levels
    for f in _level_factors(fixed.shape, p.levels, min_side):
        fl = resize_by_scale(fixed, f)
        ml = resize_by_scale(moving, f)
        hl, wl = fl.shape
        init_l = init if f == 1.0 else resample_field(init, wl, hl, factor=f)
        if resid is None:
            resid = DisplacementField.zeros(wl, hl)
        else:
            resid = resample_field(resid, wl, hl, factor=0.5)
        F = channels(fl)
        Fx, Fy = _gradients(F)
        total = init_l + resid
        best, since = np.inf, 0
        for _ in range(p.iters_per_level):
            M = channels(warp_image(ml, total))
            valid = warp_validity(total)
            if not valid.all():
                valid = ndimage.binary_erosion(valid, _SQUARE, iterations=reach, border_value=1)
            energy = float(((F - M) ** 2).sum(axis=0)[valid].mean()) if valid.any() else 0.0
            if energy < best * (1.0 - p.energy_tolerance):
                best, since = energy, 0
            else:
                since += 1
                if since >= p.patience:
                    break
            Mx, My = _gradients(M)
            ux, uy = kernels.demons_force(F, M, Fx, Fy, Mx, My, p.alpha, p.normalization_floor,
                                          p.max_step)
            ux = np.where(valid, ux, 0.0) * p.step_scale
            uy = np.where(valid, uy, 0.0) * p.step_scale
            if not np.any(ux) and not np.any(uy):
                break
            upd = _smooth_field(DisplacementField(ux, uy), p.sigma_fluid)
            total = compose_fields(total, upd)
            resid = _smooth_field(total - init_l, p.sigma_diffusion)
            total = init_l + resid
            if float(np.mean(upd.magnitude())) < p.tolerance:
                break
        resid = total - init_l
    return init + resid


def demons_register(fixed, moving, init: DisplacementField | None = None,
                    p: DemonsParams | None = None) -> DisplacementField:
    """Intensity-SSD Demons refining ``init`` (zero field when omitted).

    Each iteration pushes every pixel along the symmetric force computed from
    the fixed image and the currently warped moving image, smooths that
    update with ``sigma_fluid``, composes it onto the running field and
    then smooths the deviation from ``init`` with ``sigma_diffusion``.
    Because only the deviation is smoothed, an affine ``init`` survives
    untouched.  Coarse-to-fine over ``p.levels`` halvings.
    """
    fixed = as_image(fixed)
    p = p or DemonsParams()
    init = init if init is not None else DisplacementField.zeros(fixed.shape[1], fixed.shape[0])
    return _run(fixed, moving, init, p, _channels_intensity, min_side=8, reach=2)


def mind_demons_register(fixed, moving, init: DisplacementField | None = None,
                         p: DemonsParams | None = None) -> DisplacementField:
    """Demons driven by the six-channel MIND residual.

    The moving descriptor is recomputed from the warped moving image at
    every iteration, so it is never transported as a vector field.
    """
    fixed = as_image(fixed)
    p = p or DemonsParams()
    init = init if init is not None else DisplacementField.zeros(fixed.shape[1], fixed.shape[0])
    return _run(fixed, moving, init, p, _channels_mind, min_side=MIN_SIZE, reach=3)
