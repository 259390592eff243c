"""Initial similarity alignment with automatic failure detection.

Feature path: detect and match keypoints with each detector kind, fit a
similarity by RANSAC, score each candidate by the Dice overlap of the Li
masks, keep the best.  Fallback path: align mask centroids, grid-search the
rotation, then refine with a global affine SSD fit under per-tile intensity
correction.  Anything that still overlaps poorly is reported as a failure
and left unaligned.

All transforms map *target* (fixed) coordinates to *source* (moving)
coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .features import KINDS, EmptyKeypointsError, MatchSet, detect_features, match_features
from .imgcore import Affine2D, as_image
from .preprocess import PreprocessedPair, dice, resize_by_scale

log = logging.getLogger(__name__)

__all__ = [
    "AlignParams",
    "InitialAlignmentResult",
    "NoConsensusError",
    "estimate_similarity",
    "ransac_similarity",
    "dice_under_affine",
    "feature_candidates",
    "feature_alignment",
    "rotation_dice_profile",
    "centroid_rotation_alignment",
    "global_affine_ssd",
    "initial_alignment",
]


class NoConsensusError(RuntimeError):
    """RANSAC found no model supported by enough inliers."""


@dataclass(frozen=True)
class AlignParams:
    dice_threshold: float = 0.85
    ransac_iters: int = 2000
    inlier_tol: float = 5.0
    min_inliers: int = 6
    ratio: float = 0.75
    angle_step: float = 1.0
    affine_iters: int = 60
    affine_step: float = 1.0
    tile: int = 64
    seed: int = 0
    kinds: tuple = KINDS


@dataclass
class Candidate:
    kind: str
    transform: Affine2D
    dice: float
    inliers: MatchSet


@dataclass
class InitialAlignmentResult:
    transform: Affine2D
    dice_score: float
    method: str
    status: str
    detector_kind: str | None = None
    inlier_matches: MatchSet = field(default_factory=lambda: MatchSet(""))
    good_matches: list = field(default_factory=list)
    candidates: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.dice_score <= 1.0:
            raise ValueError("dice_score must lie in [0, 1]")
        if self.status == "fail_detected" and not np.allclose(self.transform.m, np.eye(3)):
            raise ValueError("a failed alignment must carry the identity transform")


# --------------------------------------------------------------------------
# similarity estimation
# --------------------------------------------------------------------------
def _as_complex(pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    return pts[:, 0] + 1j * pts[:, 1]


def _complex_to_affine(a, b, reflect=False):
    if reflect:
        return Affine2D([[a.real, a.imag, b.real], [a.imag, -a.real, b.imag], [0, 0, 1]])
    return Affine2D([[a.real, -a.imag, b.real], [a.imag, a.real, b.imag], [0, 0, 1]])


def estimate_similarity(src, dst, allow_reflection: bool = False) -> Affine2D:
    """Least-squares ``s R p + t`` mapping ``src`` points onto ``dst`` points.

    Written with points as complex numbers the problem is linear:
    ``dst ~ a * src + b`` with ``a = s exp(i theta)``.
    """
    zp = _as_complex(src)
    zq = _as_complex(dst)
    if zp.size != zq.size:
        raise ValueError("point lists differ in length")
    if zp.size < 2:
        raise ValueError("need at least two point pairs")
    pc = zp - zp.mean()
    qc = zq - zq.mean()
    norm = float(np.sum(np.abs(pc) ** 2))
    if norm <= 1e-12:
        raise ValueError("source points are coincident")
    a = np.sum(np.conj(pc) * qc) / norm
    best = _complex_to_affine(a, zq.mean() - a * zp.mean())
    if allow_reflection:
        ar = np.sum(pc * qc) / norm
        refl = _complex_to_affine(ar, zq.mean() - ar * np.conj(zp.mean()), reflect=True)
        if _sq_residual(refl, zp, zq) < _sq_residual(best, zp, zq):
            best = refl
    return best


def _sq_residual(a: Affine2D, zp, zq):
    m = a.m
    x = m[0, 0] * zp.real + m[0, 1] * zp.imag + m[0, 2]
    y = m[1, 0] * zp.real + m[1, 1] * zp.imag + m[1, 2]
    return float(np.sum((x - zq.real) ** 2 + (y - zq.imag) ** 2))


def ransac_similarity(matches: MatchSet, iters: int = 2000, inlier_tol: float = 5.0, seed: int = 0,
                      min_inliers: int = 6):
    """Robust similarity from target keypoints to source keypoints.

    Hypotheses come from random pairs of matches; the one with most inliers
    wins (ties: lower mean inlier residual, then earlier draw).  The winner is
    refit on its inliers until the inlier set stops changing.
    """
    n = len(matches)
    if n < 2:
        raise NoConsensusError("RANSAC needs at least two matches")
    zt = _as_complex(matches.target_points())
    zs = _as_complex(matches.source_points())
    rng = np.random.default_rng(seed)
    i = rng.integers(0, n, size=iters)
    j = rng.integers(0, n - 1, size=iters)
    j = j + (j >= i)
    dt = zt[i] - zt[j]
    ok = np.abs(dt) > 1e-9
    a = np.where(ok, (zs[i] - zs[j]) / np.where(ok, dt, 1.0), 0.0)
    b = zs[i] - a * zt[i]

    best_k, best_count, best_mean = -1, 0, np.inf
    for s in range(0, iters, 256):
        res = np.abs(a[s:s + 256, None] * zt[None, :] + b[s:s + 256, None] - zs[None, :])
        inl = (res < inlier_tol) & ok[s:s + 256, None]
        count = inl.sum(axis=1)
        mean = np.where(count > 0, (res * inl).sum(axis=1) / np.maximum(count, 1), np.inf)
        for k in range(len(count)):
            if count[k] > best_count or (count[k] == best_count and count[k] > 0 and mean[k] < best_mean):
                best_k, best_count, best_mean = s + k, int(count[k]), float(mean[k])
    if best_count < min_inliers:
        raise NoConsensusError(f"best model has {best_count} inliers, need {min_inliers}")

    inliers = np.nonzero(np.abs(a[best_k] * zt + b[best_k] - zs) < inlier_tol)[0]
    model = None
    for _ in range(5):
        model = estimate_similarity(np.c_[zt[inliers].real, zt[inliers].imag],
                                    np.c_[zs[inliers].real, zs[inliers].imag])
        m = model.m
        px = m[0, 0] * zt.real + m[0, 1] * zt.imag + m[0, 2]
        py = m[1, 0] * zt.real + m[1, 1] * zt.imag + m[1, 2]
        nxt = np.nonzero(np.hypot(px - zs.real, py - zs.imag) < inlier_tol)[0]
        if len(nxt) < min_inliers or np.array_equal(nxt, inliers):
            break
        inliers = nxt
    return model, matches.subset(inliers)


# --------------------------------------------------------------------------
# feature path
# --------------------------------------------------------------------------
def dice_under_affine(src_mask, tgt_mask, a: Affine2D) -> float:
    """Dice between ``src_mask`` resampled through ``a`` and ``tgt_mask``."""
    src = np.ascontiguousarray(src_mask, dtype=np.uint8)
    tgt = np.ascontiguousarray(tgt_mask, dtype=np.uint8)
    inter, count = kernels.affine_mask_overlap(src, tgt, np.ascontiguousarray(a.m))
    total = count + int(tgt.sum())
    return 1.0 if total == 0 else 2.0 * inter / total


def feature_candidates(pair: PreprocessedPair, params: AlignParams = AlignParams()):
    """One RANSAC candidate per detector kind plus every pre-RANSAC match set."""
    candidates, good = [], []
    for kind in params.kinds:
        src_kps = detect_features(pair.source, kind)
        tgt_kps = detect_features(pair.target, kind)
        try:
            matches = match_features(src_kps, tgt_kps, params.ratio, kind=kind)
        except EmptyKeypointsError:
            continue
        good.append(matches)
        try:
            model, inliers = ransac_similarity(matches, params.ransac_iters, params.inlier_tol,
                                               params.seed, params.min_inliers)
        except NoConsensusError as exc:
            log.debug("%s: %s", kind, exc)
            continue
        if not model.is_invertible():
            continue
        score = dice_under_affine(pair.source_mask, pair.target_mask, model)
        candidates.append(Candidate(kind, model, score, inliers))
    return candidates, good


def _identity_failure(pair, good, candidates):
    score = dice_under_affine(pair.source_mask, pair.target_mask, Affine2D.identity())
    return InitialAlignmentResult(Affine2D.identity(), score, "identity_fallback", "fail_detected",
                                  good_matches=good, candidates=candidates)


def feature_alignment(pair: PreprocessedPair, params: AlignParams = AlignParams()) -> InitialAlignmentResult:
    candidates, good = feature_candidates(pair, params)
    if candidates:
        best = max(candidates, key=lambda c: c.dice)  # first wins on ties
        if best.dice >= params.dice_threshold:
            return InitialAlignmentResult(best.transform, best.dice, "feature", "ok", best.kind,
                                          best.inliers, good, candidates)
    return _identity_failure(pair, good, candidates)


# --------------------------------------------------------------------------
# fallback path
# --------------------------------------------------------------------------
def _centroid(mask):
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("empty mask")
    return np.array([xs.mean(), ys.mean()])


def _rotation_about(c_src, c_tgt, angle):
    """Map target coords to source coords: ``c_src + R(angle) (p - c_tgt)``."""
    return Affine2D.translation(*c_src) @ Affine2D.similarity(1.0, angle) @ Affine2D.translation(*-c_tgt)


def rotation_dice_profile(src_mask, tgt_mask, angle_step: float = 1.0):
    """Angles (degrees) on the search grid and the Dice reached at each."""
    c_s = _centroid(src_mask)
    c_t = _centroid(tgt_mask)
    angles = np.arange(0.0, 360.0, angle_step)
    scores = np.array([dice_under_affine(src_mask, tgt_mask, _rotation_about(c_s, c_t, np.deg2rad(t)))
                       for t in angles])
    return angles, scores


def centroid_rotation_alignment(src_mask, tgt_mask, angle_step: float = 1.0) -> Affine2D:
    """Centroid translation plus the grid rotation with the highest Dice."""
    angles, scores = rotation_dice_profile(src_mask, tgt_mask, angle_step)
    best = int(np.argmax(scores))
    return _rotation_about(_centroid(src_mask), _centroid(tgt_mask), np.deg2rad(angles[best]))


def _tile_fit(sw, tgt, valid, tiles, ntiles):
    """Per-tile least squares ``tgt ~ a * sw + b`` on valid pixels."""
    w = valid.astype(np.float64)
    n = np.bincount(tiles, w, ntiles)
    s1 = np.bincount(tiles, w * sw, ntiles)
    t1 = np.bincount(tiles, w * tgt, ntiles)
    ss = np.bincount(tiles, w * sw * sw, ntiles)
    st = np.bincount(tiles, w * sw * tgt, ntiles)
    den = n * ss - s1 * s1
    good = den > 1e-9 * np.maximum(n, 1) ** 2
    a = np.where(good, (n * st - s1 * t1) / np.where(good, den, 1.0), 0.0)
    b = np.where(n > 0, (t1 - a * s1) / np.maximum(n, 1), 0.0)
    return a, b


def _affine_level(src, tgt, a_hat, centre, L, iters, step, tile):
    h, w = tgt.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xn = (xx - centre[0]) / L
    yn = (yy - centre[1]) / L
    gy_img, gx_img = np.gradient(src)
    tiles = ((yy // tile).astype(np.int64) * ((w + tile - 1) // tile) + (xx // tile).astype(np.int64)).ravel()
    ntiles = int(tiles.max()) + 1

    def evaluate(ah):
        px = centre[0] + L * (ah[0, 0] * xn + ah[0, 1] * yn + ah[0, 2])
        py = centre[1] + L * (ah[1, 0] * xn + ah[1, 1] * yn + ah[1, 2])
        valid = (px >= 0) & (px <= w - 1) & (py >= 0) & (py <= h - 1)
        sw = kernels.bilinear_zero(src, px, py)
        a, b = _tile_fit(sw.ravel(), tgt.ravel(), valid.ravel(), tiles, ntiles)
        a_px = a[tiles].reshape(h, w)
        r = np.where(valid, a_px * sw + b[tiles].reshape(h, w) - tgt, 0.0)
        nvalid = max(int(valid.sum()), 1)
        return float((r * r).sum() / nvalid), r, a_px, px, py, valid

    best = (np.inf, a_hat.copy())
    prev = np.inf
    worse = 0
    for _ in range(iters):
        ssd, r, a_px, px, py, valid = evaluate(a_hat)
        if ssd < best[0]:
            best = (ssd, a_hat.copy())
        worse = worse + 1 if ssd > prev else 0
        prev = ssd
        if worse >= 10:
            return None
        gx = kernels.bilinear_clamp(gx_img, px, py) * a_px * L
        gy = kernels.bilinear_clamp(gy_img, px, py) * a_px * L
        sel = valid.ravel()
        J = np.stack([gx * xn, gx * yn, gx, gy * xn, gy * yn, gy], axis=-1).reshape(-1, 6)[sel]
        rv = r.ravel()[sel]
        H = J.T @ J
        g = J.T @ rv
        H[np.diag_indices(6)] *= 1.0 + 1e-3
        try:
            delta = -np.linalg.solve(H + 1e-12 * np.eye(6), g) * step
        except np.linalg.LinAlgError:
            break
        a_hat = a_hat.copy()
        a_hat[:2, :] += delta.reshape(2, 3)
        if np.max(np.abs(delta)) < 1e-7:
            break
    ssd = evaluate(a_hat)[0]
    if ssd < best[0]:
        best = (ssd, a_hat.copy())
    return best[1]


def global_affine_ssd(src, tgt, init: Affine2D, iters: int = 60, step_size: float = 1.0,
                      tile: int = 64) -> Affine2D:
    """Affine refinement of ``init`` minimising SSD after per-tile
    contrast/brightness correction.

    Gauss-Newton steps (damped by ``step_size``) on the six affine entries,
    coarse to fine over a 4x/2x/1x pyramid; the intensity correction is refit
    per 64x64 tile (scaled with the level) on every iteration.  The best SSD
    seen on each level is kept.  If the SSD rises ten iterations in a row the
    fit is abandoned and ``init`` returned.
    """
    src = as_image(src)
    tgt = as_image(tgt)
    if src.shape != tgt.shape:
        raise ValueError(f"dimension mismatch: {src.shape} vs {tgt.shape}")
    h, w = tgt.shape
    factors = [f for f in (4, 2, 1) if min(h, w) / f >= 32] or [1]
    current = init
    per_level = max(1, iters // len(factors))
    for f in factors:
        s_l = resize_by_scale(src, f) if f > 1 else src
        t_l = resize_by_scale(tgt, f) if f > 1 else tgt
        a_l = current.scaled(1.0 / f)
        hl, wl = t_l.shape
        centre = np.array([(wl - 1) / 2, (hl - 1) / 2])
        L = max(hl, wl) / 2
        N = np.array([[1 / L, 0, -centre[0] / L], [0, 1 / L, -centre[1] / L], [0, 0, 1]])
        a_hat = N @ a_l.m @ np.linalg.inv(N)
        out = _affine_level(s_l, t_l, a_hat, centre, L, per_level, step_size, max(8, tile // f))
        if out is None:
            log.warning("global affine SSD diverged; keeping the initial transform")
            return init
        m = np.linalg.inv(N) @ out @ N
        m[2] = (0, 0, 1)
        current = Affine2D(m).scaled(float(f))
    if not current.is_invertible():
        return init
    return current


def initial_alignment(pair: PreprocessedPair, params: AlignParams = AlignParams()) -> InitialAlignmentResult:
    """Feature path, then the fallback path, then the identity as a flagged failure."""
    feat = feature_alignment(pair, params)
    if feat.status == "ok":
        return feat
    try:
        rough = centroid_rotation_alignment(pair.source_mask, pair.target_mask, params.angle_step)
    except ValueError:
        return feat
    refined = global_affine_ssd(pair.source, pair.target, rough, params.affine_iters,
                                params.affine_step, params.tile)
    options = [(dice_under_affine(pair.source_mask, pair.target_mask, t), k, t)
               for k, t in enumerate((refined, rough))]
    score, _, transform = max(options, key=lambda o: (o[0], -o[1]))
    if score >= params.dice_threshold:
        return InitialAlignmentResult(transform, score, "centroid_rotation", "ok",
                                      good_matches=feat.good_matches, candidates=feat.candidates)
    return feat
