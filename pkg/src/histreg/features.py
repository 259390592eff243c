"""Keypoint detection, description and matching.

Three detector kinds, one per role in the initial-alignment portfolio:

``blob_scale_space``
    difference-of-Gaussians blobs with 128-float gradient histograms
    (OpenCV SIFT);
``fast_binary``
    FAST corners with 256-bit rotated BRIEF strings (OpenCV ORB);
``hessian_blob``
    determinant-of-Hessian blobs over a Gaussian scale space with a 64-float
    Haar-style descriptor, implemented here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import cv2
import numpy as np
from scipy import ndimage

from .imgcore import as_image

KINDS = ("blob_scale_space", "fast_binary", "hessian_blob")
MAX_KEYPOINTS = 5000
MIN_SIDE = 64
RATIO = 0.75

cv2.setNumThreads(1)


@dataclass(frozen=True)
class Keypoint:
    x: float
    y: float
    scale: float
    orientation: float
    descriptor: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class MatchSet:
    """Correspondences; ``pairs`` holds ``(source kp, target kp, distance)``."""

    detector_kind: str
    pairs: tuple = ()

    def __len__(self):
        return len(self.pairs)

    def source_points(self) -> np.ndarray:
        return np.array([[s.x, s.y] for s, _, _ in self.pairs], dtype=np.float64).reshape(-1, 2)

    def target_points(self) -> np.ndarray:
        return np.array([[t.x, t.y] for _, t, _ in self.pairs], dtype=np.float64).reshape(-1, 2)

    def distances(self) -> np.ndarray:
        return np.array([d for _, _, d in self.pairs], dtype=np.float64)

    def subset(self, idx) -> MatchSet:
        return MatchSet(self.detector_kind, tuple(self.pairs[i] for i in idx))


class TooSmallImageError(ValueError):
    pass


def _to_u8(img):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def _from_cv(kps, desc, binary):
    if desc is None or not kps:
        return []
    out = []
    for kp, d in zip(kps, desc):
        d = np.unpackbits(d) if binary else d.astype(np.float64)
        out.append(Keypoint(float(kp.pt[0]), float(kp.pt[1]), float(kp.size),
                            math.radians(kp.angle) if kp.angle >= 0 else 0.0, d))
    return out


def _detect_sift(img):
    sift = cv2.SIFT_create(nfeatures=MAX_KEYPOINTS)
    kps, desc = sift.detectAndCompute(_to_u8(img), None)
    return _from_cv(kps, desc, binary=False)


def _detect_orb(img):
    orb = cv2.ORB_create(nfeatures=MAX_KEYPOINTS, fastThreshold=10, edgeThreshold=31, patchSize=31)
    kps, desc = orb.detectAndCompute(_to_u8(img), None)
    return _from_cv(kps, desc, binary=True)


# --------------------------------------------------------------------------
# determinant-of-Hessian detector with a Haar-style descriptor
# --------------------------------------------------------------------------
DOH_SIGMAS = tuple(1.6 * 2 ** (k / 3) for k in range(10))
DOH_THRESHOLD = 1e-4


def _scale_space(img):
    """Per scale: (determinant of Hessian * sigma^4, d/dx, d/dy)."""
    doh, grads = [], []
    for s in DOH_SIGMAS:
        smooth = ndimage.gaussian_filter(img, s, mode="nearest", truncate=3.0)
        ly, lx = np.gradient(smooth)
        lxy, lxx = np.gradient(lx)
        lyy = np.gradient(ly, axis=0)
        doh.append(s ** 4 * (lxx * lyy - lxy * lxy))
        grads.append((lx, ly))
    return np.stack(doh), grads


def _haar_descriptors(grads, pts, levels):
    """64-float descriptors: orientation from weighted gradients, then 4x4
    cells of (sum dx, sum dy, sum |dx|, sum |dy|) on a rotated 20x20 grid."""
    n = len(pts)
    desc = np.zeros((n, 64))
    angles = np.zeros(n)
    if n == 0:
        return desc, angles
    g = (np.arange(20) - 9.5) / 20.0  # unit square sample offsets
    gy, gx = np.meshgrid(g, g, indexing="ij")
    gw = np.exp(-(gx ** 2 + gy ** 2) / (2 * 0.33 ** 2))
    ring = np.linspace(0, 2 * np.pi, 48, endpoint=False)
    radii = np.array([1.0, 2.0, 3.0, 4.5, 6.0])
    for lev in np.unique(levels):
        sel = np.nonzero(levels == lev)[0]
        s = DOH_SIGMAS[lev]
        dx, dy = grads[lev]
        px = pts[sel, 0][:, None]
        py = pts[sel, 1][:, None]
        # orientation: weighted mean gradient direction on rings of radius k*s
        ox = (px[:, :, None] + s * radii[None, :, None] * np.cos(ring)[None, None, :]).reshape(len(sel), -1)
        oy = (py[:, :, None] + s * radii[None, :, None] * np.sin(ring)[None, None, :]).reshape(len(sel), -1)
        wr = np.repeat(np.exp(-radii ** 2 / (2 * 2.5 ** 2)), ring.size)[None, :]
        sx = (ndimage.map_coordinates(dx, [oy, ox], order=1, mode="nearest") * wr).sum(1)
        sy = (ndimage.map_coordinates(dy, [oy, ox], order=1, mode="nearest") * wr).sum(1)
        theta = np.arctan2(sy, sx)
        c, sn = np.cos(theta)[:, None, None], np.sin(theta)[:, None, None]
        span = 20.0 * s
        lx = gx[None] * span
        ly = gy[None] * span
        qx = px[:, :, None] + c * lx - sn * ly
        qy = py[:, :, None] + sn * lx + c * ly
        qx = qx.reshape(len(sel), -1)
        qy = qy.reshape(len(sel), -1)
        vx = ndimage.map_coordinates(dx, [qy, qx], order=1, mode="constant").reshape(len(sel), 20, 20)
        vy = ndimage.map_coordinates(dy, [qy, qx], order=1, mode="constant").reshape(len(sel), 20, 20)
        # rotate gradients into the keypoint frame
        rx = (c * vx + sn * vy) * gw
        ry = (-sn * vx + c * vy) * gw
        cells = []
        for arr in (rx, ry, np.abs(rx), np.abs(ry)):
            cells.append(arr.reshape(len(sel), 4, 5, 4, 5).sum(axis=(2, 4)))
        d = np.stack(cells, axis=-1).reshape(len(sel), 64)
        norm = np.linalg.norm(d, axis=1, keepdims=True)
        desc[sel] = d / np.where(norm > 0, norm, 1.0)
        angles[sel] = theta
    return desc, angles


def _detect_hessian(img):
    stack, grads = _scale_space(img)
    peak = ndimage.maximum_filter(stack, size=3, mode="nearest")
    cand = (stack == peak) & (stack > DOH_THRESHOLD)
    cand[0] = False
    cand[-1] = False
    border = 4
    cand[:, :border] = False
    cand[:, -border:] = False
    cand[:, :, :border] = False
    cand[:, :, -border:] = False
    ks, ys, xs = np.nonzero(cand)
    if ks.size == 0:
        return []
    resp = stack[ks, ys, xs]
    order = np.lexsort((xs, ys, ks, -resp))[:MAX_KEYPOINTS]
    ks, ys, xs = ks[order], ys[order], xs[order]
    sig = np.array(DOH_SIGMAS)[ks]
    pts = np.stack([xs, ys], axis=1).astype(np.float64)
    # sub-pixel refinement of the spatial position by a quadratic fit
    for axis, (dyo, dxo) in ((0, (0, 1)), (1, (1, 0))):
        plus = stack[ks, np.clip(ys + dyo, 0, img.shape[0] - 1), np.clip(xs + dxo, 0, img.shape[1] - 1)]
        minus = stack[ks, np.clip(ys - dyo, 0, img.shape[0] - 1), np.clip(xs - dxo, 0, img.shape[1] - 1)]
        centre = stack[ks, ys, xs]
        den = plus - 2 * centre + minus
        off = np.where(den < 0, 0.5 * (minus - plus) / np.where(den < 0, den, -1.0), 0.0)
        pts[:, axis] += np.clip(off, -0.5, 0.5)
    desc, angles = _haar_descriptors(grads, pts, ks)
    return [Keypoint(float(p[0]), float(p[1]), float(2 * s), float(a), d)
            for p, s, a, d in zip(pts, sig, angles, desc)]


_DETECTORS = {
    "blob_scale_space": _detect_sift,
    "fast_binary": _detect_orb,
    "hessian_blob": _detect_hessian,
}


def detect_features(img, kind: str) -> list[Keypoint]:
    """Keypoints with descriptors, at most :data:`MAX_KEYPOINTS` of them."""
    img = as_image(img)
    if kind not in _DETECTORS:
        raise ValueError(f"unknown detector kind {kind!r}; choose from {KINDS}")
    if min(img.shape) < MIN_SIDE:
        raise TooSmallImageError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape}")
    if float(img.max()) == float(img.min()):
        return []
    kps = _DETECTORS[kind](img)
    return kps[:MAX_KEYPOINTS]


def is_binary(kps) -> bool:
    return bool(kps) and kps[0].descriptor.dtype == np.uint8


def _top2(a, b, binary, chunk=1024):
    """Best and second-best distances (rows of a vs b) plus column argmins."""
    a = a.astype(np.float32)
    b = b.astype(np.float32)
    na = a.shape[0]
    best = np.empty(na, dtype=np.int64)
    d1 = np.empty(na)
    d2 = np.full(na, np.inf)
    col_best = np.full(b.shape[0], np.inf)
    col_arg = np.zeros(b.shape[0], dtype=np.int64)
    bb = (b * b).sum(1)
    for s in range(0, na, chunk):
        blk = a[s:s + chunk]
        if binary:
            dist = (blk.sum(1)[:, None] + b.sum(1)[None, :] - 2.0 * blk @ b.T).astype(np.float64)
            dist = np.rint(dist)
        else:
            sq = (blk * blk).sum(1)[:, None] + bb[None, :] - 2.0 * blk @ b.T
            dist = np.sqrt(np.maximum(sq.astype(np.float64), 0.0))
        rows = np.arange(blk.shape[0])
        if dist.shape[1] > 1:
            two = np.argpartition(dist, 1, axis=1)[:, :2]
            swap = dist[rows, two[:, 1]] < dist[rows, two[:, 0]]
            two[swap] = two[swap][:, ::-1]
            d2[s:s + chunk] = dist[rows, two[:, 1]]
        else:
            two = np.zeros((blk.shape[0], 1), dtype=np.int64)
        best[s:s + chunk] = two[:, 0]
        d1[s:s + chunk] = dist[rows, two[:, 0]]
        cmin = dist.min(axis=0)
        carg = dist.argmin(axis=0) + s
        upd = cmin < col_best
        col_best[upd] = cmin[upd]
        col_arg[upd] = carg[upd]
    return best, d1, d2, col_arg


class EmptyKeypointsError(ValueError):
    pass


def match_features(src_kps, tgt_kps, ratio: float = RATIO, kind: str = "") -> MatchSet:
    """Mutual nearest neighbours that pass Lowe's ratio test.

    Distances are Euclidean for float descriptors and Hamming for binary ones.
    A pair survives when ``best < ratio * second_best`` in the source->target
    direction and the target's nearest source is the same point.
    """
    if not src_kps or not tgt_kps:
        raise EmptyKeypointsError("matching needs keypoints on both sides")
    binary = is_binary(src_kps)
    a = np.stack([k.descriptor for k in src_kps])
    b = np.stack([k.descriptor for k in tgt_kps])
    best, d1, d2, col_arg = _top2(a, b, binary)
    pairs = []
    for i in range(len(src_kps)):
        j = best[i]
        if col_arg[j] != i:
            continue
        if not d1[i] < ratio * d2[i]:
            continue
        pairs.append((src_kps[i], tgt_kps[j], float(d1[i])))
    return MatchSet(kind, tuple(pairs))
