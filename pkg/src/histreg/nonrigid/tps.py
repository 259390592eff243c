"""Thin plate spline interpolation of point correspondences."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import kernels
from ..imgcore import Affine2D, DisplacementField

__all__ = ["TpsModel", "DegenerateControlPointsError", "tps_fit", "tps_to_field", "tps_from_matches"]


class DegenerateControlPointsError(ValueError):
    """Too few, duplicated or collinear control points."""


@dataclass(frozen=True)
class TpsModel:
    """``T(p) = A p + sum_i w_i U(|p - c_i|)`` with ``U(r) = r^2 log r``."""

    control_points: np.ndarray  # (n, 2), fixed space
    weights: np.ndarray  # (n, 2)
    affine_part: Affine2D
    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        c = np.asarray(self.control_points, dtype=np.float64).reshape(-1, 2)
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1, 2)
        if c.shape != w.shape:
            raise ValueError("one weight pair per control point is required")
        object.__setattr__(self, "control_points", c)
        object.__setattr__(self, "weights", w)

    def __call__(self, pts) -> np.ndarray:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return self._eval(pts[:, 0], pts[:, 1])

    def _eval(self, x, y):
        m = self.affine_part.m
        ax = m[0, 0] * x + m[0, 1] * y + m[0, 2]
        ay = m[1, 0] * x + m[1, 1] * y + m[1, 2]
        c, w = self.control_points, self.weights
        kx, ky = kernels.tps_kernel_sum(np.ascontiguousarray(c[:, 0]), np.ascontiguousarray(c[:, 1]),
                                        np.ascontiguousarray(w[:, 0]), np.ascontiguousarray(w[:, 1]),
                                        np.ascontiguousarray(x, dtype=np.float64),
                                        np.ascontiguousarray(y, dtype=np.float64))
        return np.stack([ax + kx, ay + ky], axis=-1)

    def bending_norm(self) -> float:
        """Frobenius norm of the nonlinear weights."""
        return float(np.linalg.norm(self.weights))


def _kernel_matrix(a, b):
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d2 > 0, 0.5 * d2 * np.log(np.where(d2 > 0, d2, 1.0)), 0.0)


def tps_fit(src_pts, tgt_pts, lam: float = 0.0) -> TpsModel:
    """Fit the spline taking ``src_pts`` to ``tgt_pts``.

    ``lam`` is added to the kernel diagonal; 0 gives exact interpolation.
    """
    src = np.asarray(src_pts, dtype=np.float64).reshape(-1, 2)
    tgt = np.asarray(tgt_pts, dtype=np.float64).reshape(-1, 2)
    if src.shape != tgt.shape:
        raise ValueError("source and target point counts differ")
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    n = len(src)
    if n < 3:
        raise DegenerateControlPointsError("a thin plate spline needs at least 3 control points")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(tgt))):
        raise ValueError("control points must be finite")
    if len(np.unique(src, axis=0)) < n:
        raise DegenerateControlPointsError("duplicate control points")
    centred = src - src.mean(axis=0)
    sv = np.linalg.svd(centred, compute_uv=False)
    if sv[1] <= 1e-9 * max(sv[0], 1.0):
        raise DegenerateControlPointsError("control points are collinear")

    # solve in centred, unit-scale coordinates for conditioning;
    # U(s r) = s^2 U(r) + s^2 r^2 log s and under the side conditions the
    # second term only contributes a constant, folded into the offset below
    mu = src.mean(axis=0)
    s = float(np.sqrt((centred ** 2).sum(axis=1).mean()))
    q = centred / s
    K = _kernel_matrix(q, q) + (lam / (s * s)) * np.eye(n)
    P = np.hstack([np.ones((n, 1)), q])
    L = np.zeros((n + 3, n + 3))
    L[:n, :n] = K
    L[:n, n:] = P
    L[n:, :n] = P.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = tgt
    sol = np.linalg.solve(L, rhs)
    w_unit = sol[:n]
    a = sol[n:]  # rows: constant, x, y in normalised coordinates
    weights = w_unit / (s * s)
    lin = a[1:].T / s  # 2x2 acting on (p - mu)
    off = a[0] - lin @ mu - np.log(s) * (w_unit * (q ** 2).sum(axis=1)[:, None]).sum(axis=0)
    affine = Affine2D([[lin[0, 0], lin[0, 1], off[0]], [lin[1, 0], lin[1, 1], off[1]], [0, 0, 1]])
    return TpsModel(src.copy(), weights, affine, float(lam))


def tps_to_field(model: TpsModel, width: int, height: int, step: int = 1) -> DisplacementField:
    """Dense ``T(p) - p`` on a ``width`` x ``height`` grid.

    With ``step > 1`` the spline is evaluated every ``step`` pixels (plus the
    last row and column) and bilinearly interpolated in between, which is
    much cheaper for many control points.
    """
    if step < 1:
        raise ValueError("step must be >= 1")
    if step == 1:
        yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
        out = model._eval(xx, yy)
        return DisplacementField(out[..., 0] - xx, out[..., 1] - yy)
    gx = np.unique(np.append(np.arange(0, width, step), width - 1)).astype(np.float64)
    gy = np.unique(np.append(np.arange(0, height, step), height - 1)).astype(np.float64)
    cy, cx = np.meshgrid(gy, gx, indexing="ij")
    coarse = model._eval(cx, cy)
    du = coarse[..., 0] - cx
    dv = coarse[..., 1] - cy
    # fractional coarse-grid coordinates of every pixel
    fx = np.interp(np.arange(width), gx, np.arange(gx.size))
    fy = np.interp(np.arange(height), gy, np.arange(gy.size))
    py, px = np.meshgrid(fy, fx, indexing="ij")
    return DisplacementField(kernels.bilinear_clamp(du, px, py), kernels.bilinear_clamp(dv, px, py))


def tps_from_matches(match_sets, lam: float = 10.0, snap: float = 2.0, max_points: int = 1000,
                     scale: float = 1.0) -> TpsModel:
    """Pool correspondences from several match sets into one spline.

    The spline maps target keypoints onto source keypoints (fixed to moving,
    like every field here).  Matches whose target keypoint lands in an
    already used ``snap``-pixel cell are dropped, keeping the one with the
    lowest descriptor distance relative to its own detector's median; at
    most ``max_points`` survive.  ``scale`` divides all coordinates, for
    matches found at a different resolution.
    """
    rows = []
    for ms in match_sets:
        if len(ms) == 0:
            continue
        d = ms.distances()
        med = float(np.median(d))
        rel = d / med if med > 0 else d
        rows.append(np.column_stack([ms.target_points() / scale, ms.source_points() / scale, rel]))
    if not rows:
        raise DegenerateControlPointsError("no correspondences to interpolate")
    data = np.vstack(rows)
    data = data[np.lexsort((data[:, 1], data[:, 0], data[:, 4]))]
    cells = np.floor(data[:, :2] / snap).astype(np.int64)
    _, first = np.unique(cells, axis=0, return_index=True)
    data = data[np.sort(first)][:max_points]
    return tps_fit(data[:, :2], data[:, 2:4], lam)
