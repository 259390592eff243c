"""Raster, transform and resampling primitives.

Conventions used everywhere in the package:

* an image is a 2-D float64 numpy array ``(height, width)`` with values
  nominally in [0, 1]; a mask is a 2-D bool array;
* points are ``(x, y)`` with ``x`` the column and ``y`` the row, origin at the
  centre of pixel (0, 0);
* displacement fields are *backward*: output pixel ``p`` samples the moving
  image at ``p + d(p)``.  An :class:`Affine2D` used for registration maps
  fixed coordinates into moving coordinates for the same reason.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels

__all__ = [
    "Affine2D",
    "DisplacementField",
    "as_image",
    "warp_image",
    "affine_to_field",
    "compose_fields",
    "transform_points",
    "warp_points",
    "sample_field",
    "resample_field",
    "write_dfl",
    "read_dfl",
]


def as_image(img) -> np.ndarray:
    """Validate and return ``img`` as a contiguous float64 2-D array."""
    arr = np.ascontiguousarray(img, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains NaN or Inf")
    return arr


@dataclass(frozen=True)
class Affine2D:
    """Planar affine transform stored as a 3x3 homogeneous matrix."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape == (2, 3):
            m = np.vstack([m, [0.0, 0.0, 1.0]])
        if m.shape != (3, 3):
            raise ValueError(f"affine matrix must be 3x3, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ValueError("bottom row of an affine matrix must be (0, 0, 1)")
        if not np.all(np.isfinite(m)):
            raise ValueError("affine matrix contains NaN or Inf")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> Affine2D:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> Affine2D:
        return cls([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def similarity(cls, scale: float = 1.0, angle: float = 0.0, tx: float = 0.0,
                   ty: float = 0.0) -> Affine2D:
        """``p -> scale * R(angle) p + t`` with ``angle`` in radians."""
        c, s = scale * np.cos(angle), scale * np.sin(angle)
        return cls([[c, -s, tx], [s, c, ty], [0.0, 0.0, 1.0]])

    @classmethod
    def about(cls, center, scale: float = 1.0, angle: float = 0.0, shift=(0.0, 0.0)) -> Affine2D:
        """Similarity about ``center`` followed by a translation ``shift``."""
        cx, cy = center
        core = cls.similarity(scale, angle)
        return cls.translation(cx + shift[0], cy + shift[1]) @ core @ cls.translation(-cx, -cy)

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.m[:2, :2]))

    def is_invertible(self, tol: float = 1e-12) -> bool:
        return abs(self.det) > tol

    def inverse(self) -> Affine2D:
        if not self.is_invertible():
            raise np.linalg.LinAlgError("singular affine transform")
        inv = np.linalg.inv(self.m)
        inv[2] = (0.0, 0.0, 1.0)
        return Affine2D(inv)

    def __matmul__(self, other: Affine2D) -> Affine2D:
        out = self.m @ other.m
        out[2] = (0.0, 0.0, 1.0)
        return Affine2D(out)

    def scaled(self, s: float) -> Affine2D:
        """Same map expressed in coordinates multiplied by ``s``."""
        S = np.diag([s, s, 1.0])
        Si = np.diag([1.0 / s, 1.0 / s, 1.0])
        return Affine2D(S @ self.m @ Si)

    def decompose_similarity(self):
        """(scale, angle, tx, ty) of the closest similarity (assumes no shear)."""
        a, b = self.m[0, 0], self.m[1, 0]
        return float(np.hypot(a, b)), float(np.arctan2(b, a)), float(self.m[0, 2]), float(self.m[1, 2])

    def to_list(self):
        return self.m.tolist()


@dataclass(frozen=True)
class DisplacementField:
    """Dense backward displacement field; ``u`` is the x part, ``v`` the y part."""

    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        u = np.ascontiguousarray(self.u, dtype=np.float64)
        v = np.ascontiguousarray(self.v, dtype=np.float64)
        if u.ndim != 2 or u.shape != v.shape:
            raise ValueError(f"u and v must be equally shaped 2-D arrays, got {u.shape} and {v.shape}")
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise ValueError("displacement field contains NaN or Inf")
        u.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls, width: int, height: int) -> DisplacementField:
        z = np.zeros((height, width))
        return cls(z, z.copy())

    @classmethod
    def constant(cls, width: int, height: int, dx: float, dy: float) -> DisplacementField:
        return cls(np.full((height, width), float(dx)), np.full((height, width), float(dy)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.u.shape

    @property
    def width(self) -> int:
        return self.u.shape[1]

    @property
    def height(self) -> int:
        return self.u.shape[0]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def max_magnitude(self) -> float:
        return float(self.magnitude().max()) if self.u.size else 0.0

    def __add__(self, other: DisplacementField) -> DisplacementField:
        _check_same(self.shape, other.shape)
        return DisplacementField(self.u + other.u, self.v + other.v)

    def __sub__(self, other: DisplacementField) -> DisplacementField:
        _check_same(self.shape, other.shape)
        return DisplacementField(self.u - other.u, self.v - other.v)

    def as_float32(self) -> DisplacementField:
        """Round to what the DFL1 format can store."""
        return DisplacementField(self.u.astype(np.float32).astype(np.float64),
                                 self.v.astype(np.float32).astype(np.float64))

    def sample_positions(self):
        """Absolute sampling coordinates ``p + d(p)``."""
        yy, xx = _grid(self.shape)
        return xx + self.u, yy + self.v


def _grid(shape):
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    return yy.astype(np.float64), xx.astype(np.float64)


def _check_same(a, b):
    if tuple(a) != tuple(b):
        raise ValueError(f"dimension mismatch: {tuple(a)} vs {tuple(b)}")


def warp_image(img, field: DisplacementField, interp: str = "bilinear") -> np.ndarray:
    """Resample ``img`` at ``p + field(p)``; samples outside the raster are 0."""
    img = as_image(img)
    _check_same(img.shape, field.shape)
    x, y = field.sample_positions()
    if interp == "bilinear":
        return kernels.bilinear_zero(img, x, y)
    if interp == "nearest":
        return kernels.nearest_zero(img, x, y)
    raise ValueError(f"unknown interpolation {interp!r}")


def warp_validity(field: DisplacementField) -> np.ndarray:
    """Boolean map of output pixels whose sample falls inside the raster."""
    x, y = field.sample_positions()
    h, w = field.shape
    tol = kernels.EDGE_TOL
    return (x >= -tol) & (x <= w - 1 + tol) & (y >= -tol) & (y <= h - 1 + tol)


def affine_to_field(a: Affine2D, width: int, height: int) -> DisplacementField:
    """Dense field ``d(p) = a p - p`` over a ``width`` x ``height`` grid."""
    if not a.is_invertible():
        raise np.linalg.LinAlgError("cannot rasterise a singular affine transform")
    yy, xx = _grid((height, width))
    m = a.m
    u = (m[0, 0] - 1.0) * xx + m[0, 1] * yy + m[0, 2]
    v = m[1, 0] * xx + (m[1, 1] - 1.0) * yy + m[1, 2]
    return DisplacementField(u, v)


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """``result(p) = inner(p) + outer(p + inner(p))``.

    Warping with the result equals warping with ``outer`` first and then with
    ``inner``.  ``outer`` is sampled bilinearly with edge clamping, so a
    displacement never drops to zero just because it was looked up past the
    border.
    """
    _check_same(outer.shape, inner.shape)
    if not inner.u.any() and not inner.v.any():
        return outer
    if not outer.u.any() and not outer.v.any():
        return inner
    x, y = inner.sample_positions()
    return DisplacementField(inner.u + kernels.bilinear_clamp(outer.u, x, y),
                             inner.v + kernels.bilinear_clamp(outer.v, x, y))


def transform_points(a: Affine2D, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts @ a.m[:2, :2].T + a.m[:2, 2]


def sample_field(field: DisplacementField, pts) -> np.ndarray:
    """Bilinear field values at arbitrary points (edge-clamped), shape (n, 2)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    x = np.ascontiguousarray(pts[:, 0])
    y = np.ascontiguousarray(pts[:, 1])
    return np.stack([kernels.bilinear_clamp(field.u, x, y),
                     kernels.bilinear_clamp(field.v, x, y)], axis=1)


def warp_points(field: DisplacementField, pts) -> np.ndarray:
    """Map fixed-space points ``p`` to ``p + d(p)``."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    h, w = field.shape
    tol = kernels.EDGE_TOL
    bad = ((pts[:, 0] < -tol) | (pts[:, 0] > w - 1 + tol)
           | (pts[:, 1] < -tol) | (pts[:, 1] > h - 1 + tol))
    if bad.any():
        raise ValueError(f"{int(bad.sum())} point(s) outside the {w}x{h} field")
    return pts + sample_field(field, pts)


def invert_points(field: DisplacementField, pts, iters: int = 50, tol: float = 1e-6) -> np.ndarray:
    """Find ``p`` with ``p + d(p) = q`` for each moving-space point ``q``.

    Fixed-point iteration ``p <- q - d(p)``; converges for fields whose
    Jacobian stays well away from folding, which every engine here produces.
    """
    q = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    p = q - sample_field(field, q)
    for _ in range(iters):
        nxt = q - sample_field(field, p)
        done = np.max(np.abs(nxt - p)) < tol if len(p) else True
        p = nxt
        if done:
            break
    return p


def resample_field(field: DisplacementField, width: int, height: int,
                   factor: float | None = None) -> DisplacementField:
    """Express ``field`` on a grid of another resolution.

    New pixel ``i`` sits at old pixel ``i * factor``; displacement values are
    divided by ``factor``.  Without ``factor`` the per-axis size ratio is used.
    """
    if (height, width) == field.shape and factor in (None, 1.0):
        return field
    sx = factor if factor is not None else field.width / width
    sy = factor if factor is not None else field.height / height
    yy, xx = _grid((height, width))
    u = kernels.bilinear_clamp(field.u, xx * sx, yy * sy) / sx
    v = kernels.bilinear_clamp(field.v, xx * sx, yy * sy) / sy
    return DisplacementField(u, v)


# --------------------------------------------------------------------------
# DFL1 file format
# --------------------------------------------------------------------------
_MAGIC = b"DFL1"


def write_dfl(path, field: DisplacementField) -> None:
    """Little-endian ``DFL1`` | u32 width | u32 height | (f32 u, f32 v) row-major."""
    rec = np.empty((field.height, field.width, 2), dtype="<f4")
    rec[..., 0] = field.u
    rec[..., 1] = field.v
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", field.width, field.height))
        fh.write(rec.tobytes())


def read_dfl(path) -> DisplacementField:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != _MAGIC:
        raise ValueError(f"{path}: not a DFL1 displacement field")
    w, h = struct.unpack("<II", data[4:12])
    expected = 12 + 8 * w * h
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    rec = np.frombuffer(data, dtype="<f4", offset=12).reshape(h, w, 2)
    return DisplacementField(rec[..., 0].astype(np.float64), rec[..., 1].astype(np.float64))
