"""Synthetic histology-like images, warps and pairs with known ground truth.

Images come out in the *acquired* domain: bright background, darker stained
tissue.  All generators are deterministic in ``seed``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imgcore import Affine2D, DisplacementField, affine_to_field, compose_fields, warp_image

BACKGROUND = 0.92


def _noise(rng, shape, sigma):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    n -= n.mean()
    return n / (n.std() + 1e-12)


def _unit(x):
    lo, hi = x.min(), x.max()
    return (x - lo) / (hi - lo) if hi > lo else np.zeros_like(x)


def tissue_image(size=512, seed=0, radius=0.18, background=BACKGROUND, nuclei=True) -> np.ndarray:
    """One tissue section: an irregular blob with multi-scale texture and
    scattered dark dots, on a flat bright background."""
    rng = np.random.default_rng(seed)
    h, w = (size, size) if np.isscalar(size) else size
    s = min(h, w)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.hypot(xx - cx, yy - cy) / s
    edge = np.ones_like(theta)
    for k in range(2, 6):
        edge += rng.uniform(0.02, 0.07) * np.cos(k * theta + rng.uniform(0, 2 * np.pi))
    edge *= radius
    inside = 1.0 / (1.0 + np.exp(-(edge - r) * s / 1.5))
    tex = _unit(0.5 * _noise(rng, (h, w), 12) + 0.35 * _noise(rng, (h, w), 5) + 0.25 * _noise(rng, (h, w), 2))
    tissue = 0.22 + 0.4 * tex
    if nuclei:
        n = int(h * w / 700)
        dots = np.zeros((h, w))
        dots[rng.integers(0, h, n), rng.integers(0, w, n)] = 1.0
        dots = ndimage.gaussian_filter(dots, 1.8) * (2 * np.pi * 1.8 ** 2)
        tissue = tissue - 0.18 * np.clip(dots, 0, 1.5)
    img = background * (1 - inside) + np.clip(tissue, 0.02, 1.0) * inside
    return np.clip(img, 0.0, 1.0)


def blob_mask_image(size=256, seed=0, radius=0.25, blur=6.0, background=BACKGROUND) -> np.ndarray:
    """Low-texture tissue: a smooth asymmetric silhouette, heavily blurred."""
    rng = np.random.default_rng(seed)
    h = w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2, (h - 1) / 2
    theta = np.arctan2(yy - cy, xx - cx)
    r = np.hypot(xx - cx, yy - cy) / size
    edge = radius * (1 + 0.25 * np.cos(theta + rng.uniform(0, 2 * np.pi))
                     + 0.12 * np.cos(2 * theta + rng.uniform(0, 2 * np.pi))
                     + 0.08 * np.cos(3 * theta + rng.uniform(0, 2 * np.pi)))
    inside = (r < edge).astype(np.float64)
    inside = ndimage.gaussian_filter(inside, blur)
    return background * (1 - inside) + 0.35 * inside


def random_texture(size=512, seed=0, sigma=4.0) -> np.ndarray:
    """Full-frame smooth noise in [0, 1]."""
    rng = np.random.default_rng(seed)
    shape = (size, size) if np.isscalar(size) else size
    return _unit(_noise(rng, shape, sigma))


def smooth_field(size, amplitude, seed=0, sigma=None) -> DisplacementField:
    """Random smooth field whose largest displacement equals ``amplitude``."""
    rng = np.random.default_rng(seed)
    h, w = (size, size) if np.isscalar(size) else size
    sigma = sigma if sigma is not None else min(h, w) / 6
    u = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    v = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    mag = np.hypot(u, v).max()
    k = amplitude / mag if mag > 0 else 0.0
    return DisplacementField(u * k, v * k)


def warp_acquired(img, field: DisplacementField, background=BACKGROUND) -> np.ndarray:
    """Warp an acquired-domain image, filling the outside with background."""
    return warp_image(np.asarray(img) - background, field) + background


def add_noise(img, sigma, seed=0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(img + sigma * rng.standard_normal(np.shape(img)), 0.0, 1.0)


@dataclass
class SyntheticPair:
    """``source``/``target`` images and the exact backward field relating them.

    ``truth`` maps target (fixed) pixels to source (moving) positions:
    ``source(p + truth(p)) == target(p)`` before noise/intensity changes.
    """

    source: np.ndarray
    target: np.ndarray
    truth: DisplacementField
    affine: Affine2D | None = None


def similarity_pair(size=512, seed=0, angle_deg=0.0, scale=1.0, shift=(0.0, 0.0), noise=0.0) -> SyntheticPair:
    """Target is a tissue image; source is the same tissue under a similarity."""
    target = tissue_image(size, seed)
    centre = ((size - 1) / 2, (size - 1) / 2)
    a = Affine2D.about(centre, scale=scale, angle=np.deg2rad(angle_deg), shift=shift)
    # source(a p) = target(p)  =>  source = target warped by a^-1
    source = warp_acquired(target, affine_to_field(a.inverse(), size, size))
    if noise:
        source = add_noise(source, noise, seed + 1000)
        target = add_noise(target, noise, seed + 2000)
    return SyntheticPair(source, target, affine_to_field(a, size, size), a)


def warped_pair(size=512, seed=0, amplitude=10.0, contrast=1.0, brightness=0.0, noise=0.0,
                base=None, affine: Affine2D | None = None) -> SyntheticPair:
    """Source is a tissue image; target samples it through a smooth field
    (followed by ``affine`` when given), so the field is exactly the
    registration answer."""
    source = tissue_image(size, seed) if base is None else np.asarray(base, dtype=np.float64)
    truth = smooth_field(source.shape, amplitude, seed + 17)
    if affine is not None:
        h, w = source.shape
        truth = compose_fields(affine_to_field(affine, w, h), truth)
    target = warp_acquired(source, truth)
    if contrast != 1.0 or brightness != 0.0:
        source = np.clip(contrast * source + brightness, 0.0, 1.0)
    if noise:
        source = add_noise(source, noise, seed + 3000)
        target = add_noise(target, noise, seed + 4000)
    return SyntheticPair(source, target, truth, affine)


def multimodal_pair(size=512, seed=0, amplitude=8.0, gamma=2.0) -> SyntheticPair:
    """Registration-domain pair (tissue bright on dark): the moving image is
    the fixed one warped, contrast inverted and gamma distorted."""
    fixed = 1.0 - tissue_image(size, seed)
    truth = smooth_field(fixed.shape, amplitude, seed + 23)
    # moving(p + truth(p)) must equal a transform of fixed(p); build the
    # moving image by sampling fixed through the approximate inverse field
    inv = _approx_inverse(truth)
    moving = (1.0 - warp_image(fixed, inv)) ** gamma
    return SyntheticPair(moving, fixed, truth)


def occluded_pair(size=512, seed=0, amplitude=5.0, area_fraction=0.2, noise=0.0):
    """Full-frame texture pair with a rectangle blanked to 0 in the moving
    image.  Returns ``(pair, occlusion)``, the occlusion being the set of
    fixed-grid pixels whose true match fell inside the blanked rectangle."""
    rng = np.random.default_rng(seed + 31)
    fixed = 1.0 - tissue_image(size, seed, radius=3.0)
    truth = smooth_field(fixed.shape, amplitude, seed + 29)
    moving = warp_image(fixed, _approx_inverse(truth))
    h, w = fixed.shape
    side_y = int(round(np.sqrt(area_fraction * h * w * rng.uniform(0.7, 1.4))))
    side_y = min(side_y, h - 2)
    side_x = min(int(round(area_fraction * h * w / side_y)), w - 2)
    y0 = int(rng.integers(0, h - side_y))
    x0 = int(rng.integers(0, w - side_x))
    occ = np.zeros((h, w), dtype=bool)
    occ[y0:y0 + side_y, x0:x0 + side_x] = True
    moving = np.where(occ, 0.0, moving)
    if noise:
        fixed = add_noise(fixed, noise, seed + 5000)
        moving = add_noise(moving, noise, seed + 6000)
    occ_fixed = warp_image(occ.astype(np.float64), truth, "nearest") > 0.5
    return SyntheticPair(moving, fixed, truth), occ_fixed


def _approx_inverse(field: DisplacementField, iters: int = 30) -> DisplacementField:
    """Field ``g`` with ``g(q) + field(q + g(q)) ~ 0`` by fixed-point iteration."""
    g = DisplacementField(-field.u, -field.v)
    for _ in range(iters):
        c = compose_fields(field, g)
        g = DisplacementField(g.u - c.u, g.v - c.v)
    return g


def landmarks_in_mask(mask, n, seed=0, margin=8) -> np.ndarray:
    """``n`` distinct pixel positions drawn from ``mask`` away from the border."""
    rng = np.random.default_rng(seed)
    m = np.array(mask, dtype=bool)
    m[:margin] = m[-margin:] = False
    m[:, :margin] = m[:, -margin:] = False
    ys, xs = np.nonzero(m)
    pick = rng.choice(len(xs), size=min(n, len(xs)), replace=False)
    return np.stack([xs[pick], ys[pick]], axis=1).astype(np.float64)
