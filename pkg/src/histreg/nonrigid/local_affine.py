"""Hierarchical local affine registration with intensity correction and
missing-data weights.

At each window size the image is covered by a grid of overlapping windows
(spacing half the window).  Every window solves a weighted linear least
squares problem for a small affine motion plus a contrast and brightness
change.  The per-window solutions are blended bilinearly into a dense update
which is composed onto the running field, while the intensity change is
folded into per-pixel contrast/brightness maps.  Pixel weights come from the
residual of the previous iteration, so structures present in only one image
stop pulling on the solution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import kernels
from ..imgcore import DisplacementField, as_image, compose_fields, warp_image, warp_validity
from ..preprocess import gaussian_smooth

__all__ = ["LocalAffineParams", "LocalAffineResult", "default_schedule", "local_affine_solve",
           "local_affine_register"]

MAD_SCALE = 1.4826


@dataclass(frozen=True)
class LocalAffineParams:
    """``level_schedule`` empty means: whole image, then halving to ``min_window``.

    ``missing_prob_sigma`` of 0 re-estimates the residual scale robustly at
    every iteration; a positive value fixes it.  ``field_smoothing_sigma``
    of 0 ties the image smoothing to the window size.
    """

    level_schedule: tuple = ()
    iters_per_level: int = 5
    intensity_correction: bool = True
    missing_prob_sigma: float = 0.0
    field_smoothing_sigma: float = 0.0
    min_window: int = 32
    min_mass: float = 50.0
    ridge: float = 1e-6
    sigma_floor: float = 1e-3
    # leave a level once an accepted step gains less than this fraction
    energy_tolerance: float = 0.005
    # residual RMS below which there is nothing left to fit
    converged_rms: float = 1e-6

    def __post_init__(self):
        sched = tuple(int(s) for s in self.level_schedule)
        object.__setattr__(self, "level_schedule", sched)
        if any(b >= a for a, b in zip(sched, sched[1:])):
            raise ValueError("window sizes must be strictly decreasing")
        if sched and sched[-1] < 16:
            raise ValueError("windows smaller than 16 px are not supported")
        if self.min_window < 16:
            raise ValueError("min_window must be >= 16")
        if self.iters_per_level < 1:
            raise ValueError("iters_per_level must be >= 1")
        if self.missing_prob_sigma < 0 or self.field_smoothing_sigma < 0:
            raise ValueError("sigmas must be >= 0")


@dataclass
class LocalAffineResult:
    field: DisplacementField
    contrast: np.ndarray
    brightness: np.ndarray
    weights: np.ndarray
    # (window, weighted energy before, weighted energy after) per accepted step
    history: list = field(default_factory=list)


def default_schedule(shape, min_window: int = 32) -> tuple:
    w = int(max(shape))
    out = [w]
    while w // 2 >= min_window:
        w //= 2
        out.append(w)
    return tuple(out)


def _robust_sigma(resid, informative, floor):
    r = np.abs(resid[informative])
    if r.size == 0:
        return floor
    return max(MAD_SCALE * float(np.median(r)), floor)


def _solve_windows(ata, atb, mass, p: LocalAffineParams, intensity: bool):
    nwy, nwx = mass.shape
    A = ata.reshape(-1, 8, 8).copy()
    b = atb.reshape(-1, 8).copy()
    if not intensity:
        A = A[:, :6, :6]
        b = b[:, :6]
    n = A.shape[1]
    tr = np.trace(A, axis1=1, axis2=2)
    reg = p.ridge * np.maximum(tr / n, 1e-12)
    A = A + reg[:, None, None] * np.eye(n)
    ok = mass.ravel() >= p.min_mass
    # rank check via the condition number of the regularised system
    eig = np.linalg.eigvalsh(A)
    ok &= eig[:, 0] > 1e-10 * np.maximum(eig[:, -1], 1e-300)
    sol = np.zeros((A.shape[0], 8))
    if ok.any():
        sol[ok, :n] = np.linalg.solve(A[ok], b[ok][..., None])[..., 0]
    return sol.reshape(nwy, nwx, 8)


def _blend(params, shape, spacing):
    """Dense (dx, dy, gamma, beta) from per-window parameters."""
    h, w = shape
    nwy, nwx = params.shape[:2]
    if nwy == 1 and nwx == 1:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        xr = (xx - (w - 1) / 2) / spacing
        yr = (yy - (h - 1) / 2) / spacing
        q = params[0, 0]
        return (q[0] * xr + q[1] * yr + q[4], q[2] * xr + q[3] * yr + q[5],
                np.full(shape, q[6]), np.full(shape, q[7]))
    out = kernels.blend_windows(np.ascontiguousarray(params), h, w, float(spacing))
    return out[0], out[1], out[2], out[3]


def _global_eqs(gx, gy, mw, rhs, wgt, spacing):
    h, w = gx.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xr = (xx - (w - 1) / 2) / spacing
    yr = (yy - (h - 1) / 2) / spacing
    phi = np.stack([gx * xr, gx * yr, gy * xr, gy * yr, gx, gy, mw, np.ones_like(mw)], axis=-1)
    phi = phi.reshape(-1, 8)
    wv = wgt.ravel()
    ata = (phi * wv[:, None]).T @ phi
    atb = (phi * wv[:, None]).T @ rhs.ravel()
    return ata[None, None], atb[None, None], np.array([[wv.sum()]])


def local_affine_solve(fixed, moving, init: DisplacementField | None = None,
                       p: LocalAffineParams | None = None) -> LocalAffineResult:
    """Run the full hierarchy; see the module docstring."""
    fixed = as_image(fixed)
    moving = as_image(moving)
    p = p or LocalAffineParams()
    h, w = fixed.shape
    if moving.shape != fixed.shape:
        raise ValueError(f"dimension mismatch: {fixed.shape} vs {moving.shape}")
    total = init if init is not None else DisplacementField.zeros(w, h)
    if total.shape != fixed.shape:
        raise ValueError(f"dimension mismatch: field {total.shape} vs image {fixed.shape}")
    schedule = p.level_schedule or default_schedule(fixed.shape, p.min_window)
    contrast = np.ones((h, w))
    bright = np.zeros((h, w))
    weights = np.ones((h, w))
    history = []

    for win in schedule:
        sigma = p.field_smoothing_sigma or float(np.clip(win / 32.0, 1.0, 8.0))
        fs = gaussian_smooth(fixed, sigma)
        ms = gaussian_smooth(moving, sigma)
        gfy, gfx = np.gradient(fs)
        gmag_f = np.hypot(gfx, gfy)
        single = win >= max(h, w)
        spacing = max(h, w) / 2.0 if single else win / 2.0
        nwx = int(np.ceil((w - 1) / spacing)) + 1
        nwy = int(np.ceil((h - 1) / spacing)) + 1
        cap = max(1.0, win / 16.0)

        def corrected(fld, c, b):
            return c * warp_image(ms, fld) + b

        for _ in range(p.iters_per_level):
            valid = warp_validity(total)
            mw = corrected(total, contrast, bright)
            resid = mw - fs
            gy, gx = np.gradient(mw)
            thr_f = 0.05 * max(float(np.percentile(gmag_f, 99)), 1e-12)
            thr_m = 0.05 * max(float(np.percentile(np.hypot(gx, gy), 99)), 1e-12)
            informative = valid & ((gmag_f > thr_f) | (np.hypot(gx, gy) > thr_m))
            s = p.missing_prob_sigma or _robust_sigma(resid, informative, p.sigma_floor)
            weights = np.where(valid, np.exp(-resid ** 2 / (2.0 * s * s)), 0.0)
            e0 = float((weights * resid ** 2).sum())
            if e0 <= p.converged_rms ** 2 * max(int(valid.sum()), 1):
                break
            rhs = -resid
            if single:
                ata, atb, mass = _global_eqs(gx, gy, mw, rhs, weights, spacing)
            else:
                ata, atb, mass = kernels.window_normal_eqs(
                    np.ascontiguousarray(gx), np.ascontiguousarray(gy), mw, rhs, weights,
                    float(spacing), nwx, nwy)
            params = _solve_windows(ata, atb, mass, p, p.intensity_correction)
            if not np.any(params):
                break
            dx, dy, gam, beta = _blend(params, (h, w), spacing)
            mag = np.hypot(dx, dy)
            shrink = np.where(mag > cap, cap / np.maximum(mag, 1e-300), 1.0)
            dx *= shrink
            dy *= shrink
            accepted = False
            for t in (1.0, 0.5):
                cand = compose_fields(total, DisplacementField(t * dx, t * dy))
                c_new = (1.0 + t * gam) * contrast
                b_new = (1.0 + t * gam) * bright + t * beta
                # compare on pixels that stay inside the raster, so samples
                # leaving the frame cannot masquerade as a residual jump
                wc = weights * warp_validity(cand)
                before = float((wc * resid ** 2).sum())
                e1 = float((wc * (corrected(cand, c_new, b_new) - fs) ** 2).sum())
                if e1 <= before:
                    total, contrast, bright = cand, c_new, b_new
                    history.append((win, before, e1))
                    accepted = True
                    break
            if not accepted or e1 >= (1.0 - p.energy_tolerance) * before:
                break
    return LocalAffineResult(total, contrast, bright, weights, history)


def local_affine_register(fixed, moving, init: DisplacementField | None = None,
                          p: LocalAffineParams | None = None) -> DisplacementField:
    return local_affine_solve(fixed, moving, init, p).field
