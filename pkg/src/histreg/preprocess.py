"""Grayscale conversion, smoothing, resolution schedule, histogram work,
padding, inversion, Li thresholding and Dice."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .imgcore import as_image

__all__ = [
    "ResolutionPolicy",
    "PreprocessedPair",
    "DegenerateImageError",
    "to_grayscale",
    "gaussian_kernel",
    "gaussian_smooth",
    "resize_by_scale",
    "policy_scale",
    "resize_to_policy",
    "quantize",
    "histogram256",
    "shannon_entropy",
    "match_histogram",
    "entropy_ordered_match",
    "pad_to",
    "pad_to_common",
    "invert_intensity",
    "li_threshold",
    "dice",
    "preprocess_pair",
]

LUMA = (0.299, 0.587, 0.114)


class DegenerateImageError(ValueError):
    """Raised when an operation needs intensity variation that isn't there."""


@dataclass(frozen=True)
class ResolutionPolicy:
    mode: str = "max_side"
    size: int = 2048

    def __post_init__(self):
        if self.mode not in ("max_side", "min_side"):
            raise ValueError(f"unknown resolution mode {self.mode!r}")
        if self.size <= 0:
            raise ValueError("resolution size must be positive")


@dataclass(frozen=True)
class PreprocessedPair:
    """A source/target pair ready for registration.

    ``source``/``target`` are histogram matched (when ``histogram_matched``),
    inverted and padded.  ``source_raw``/``target_raw`` went through the same
    steps except the histogram matching; MIND-based code uses those.
    """

    source: np.ndarray
    target: np.ndarray
    source_mask: np.ndarray
    target_mask: np.ndarray
    scale_to_full: float
    histogram_matched: bool
    inverted: bool
    source_raw: np.ndarray | None = None
    target_raw: np.ndarray | None = None

    def __post_init__(self):
        if self.source.shape != self.target.shape:
            raise ValueError("source and target must share dimensions after padding")
        if self.scale_to_full < 1.0:
            raise ValueError("scale_to_full must be >= 1")


def to_grayscale(rgb) -> np.ndarray:
    """ITU-R 601 luma of an ``(H, W, 3)`` image with channels in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim == 2:
        return as_image(rgb)
    if rgb.ndim != 3 or rgb.shape[2] < 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    return as_image(rgb[..., 0] * LUMA[0] + rgb[..., 1] * LUMA[1] + rgb[..., 2] * LUMA[2])


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian with radius ``ceil(3 sigma)``."""
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(img, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicated borders; ``sigma == 0`` is a no-op."""
    img = as_image(img)
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img.copy()
    k = gaussian_kernel(sigma)
    out = ndimage.correlate1d(img, k, axis=0, mode="nearest")
    return ndimage.correlate1d(out, k, axis=1, mode="nearest")


def resize_by_scale(img, scale: float) -> np.ndarray:
    """Decimate by ``scale`` (>= 1): working pixel ``i`` sits at full pixel ``i*scale``."""
    img = as_image(img)
    if scale <= 1.0:
        return img.copy()
    h, w = img.shape
    nh = max(1, int(round(h / scale)))
    nw = max(1, int(round(w / scale)))
    smooth = gaussian_smooth(img, 0.5 * scale)
    yy, xx = np.mgrid[0:nh, 0:nw].astype(np.float64)
    return kernels.bilinear_clamp(smooth, xx * scale, yy * scale)


def policy_scale(width: int, height: int, policy: ResolutionPolicy) -> float:
    """Downsampling factor that brings the constrained side to ``policy.size``."""
    side = max(width, height) if policy.mode == "max_side" else min(width, height)
    return max(1.0, side / policy.size)


def resize_to_policy(img, policy: ResolutionPolicy):
    """Return ``(resized, scale)``; images already small enough pass through."""
    img = as_image(img)
    h, w = img.shape
    scale = policy_scale(w, h, policy)
    return resize_by_scale(img, scale), scale


def quantize(img) -> np.ndarray:
    """256-level bin index per pixel."""
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.int64)


def histogram256(img) -> np.ndarray:
    return np.bincount(quantize(img).ravel(), minlength=256)


def shannon_entropy(img) -> float:
    """Entropy in bits of the 256-bin intensity histogram."""
    counts = histogram256(img)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def match_histogram(subject, reference) -> np.ndarray:
    """Monotone CDF-to-CDF mapping of ``subject`` onto ``reference``.

    Works on the exact empirical CDFs rather than on 256-bin summaries: a
    subject pixel goes to its mid-rank quantile (ties share one), then to the
    linearly interpolated reference intensity at that quantile.  An image
    matched to itself comes back unchanged, and crowded bins are spread the
    same way the reference spreads them.
    """
    subject = as_image(subject)
    reference = as_image(reference)
    if subject.size == 0 or reference.size == 0:
        raise ValueError("histogram matching needs non-empty images")
    s_sorted = np.sort(subject.ravel())
    r_sorted = np.sort(reference.ravel())
    left = np.searchsorted(s_sorted, subject, side="left")
    right = np.searchsorted(s_sorted, subject, side="right")
    quantile = 0.5 * (left + right) / s_sorted.size
    r_q = (np.arange(r_sorted.size) + 0.5) / r_sorted.size
    return np.interp(quantile, r_q, r_sorted)


def entropy_ordered_match(a, b):
    """Match the lower-entropy image to the other one; ties match ``a`` to ``b``."""
    a = as_image(a)
    b = as_image(b)
    if shannon_entropy(a) <= shannon_entropy(b):
        return match_histogram(a, b), b
    return a, match_histogram(b, a)


def pad_to(img, height: int, width: int) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape
    if h > height or w > width:
        raise ValueError("cannot pad to a smaller size")
    out = np.zeros((height, width))
    out[:h, :w] = img
    return out


def pad_to_common(a, b):
    """Zero-pad both images on the right/bottom to the larger extent."""
    a = as_image(a)
    b = as_image(b)
    h = max(a.shape[0], b.shape[0])
    w = max(a.shape[1], b.shape[1])
    return pad_to(a, h, w), pad_to(b, h, w)


def invert_intensity(img) -> np.ndarray:
    return 1.0 - as_image(img)


def li_threshold(img, tolerance: float = 0.5 / 255):
    """Li's minimum cross-entropy threshold and the ``img > t`` mask.

    Fixed point ``t <- (mb - mf) / (ln mb - ln mf)`` on the intensities
    shifted to start at zero, starting from the mean, until the step drops
    below ``tolerance``.
    """
    img = as_image(img)
    lo = float(img.min())
    if float(img.max()) == lo:
        raise DegenerateImageError("Li threshold needs at least two distinct intensities")
    vals = img.ravel() - lo
    t_next = float(vals.mean())
    t_curr = -2.0 * tolerance
    while abs(t_next - t_curr) > tolerance:
        t_curr = t_next
        fore = vals > t_curr
        mean_fore = float(vals[fore].mean())
        mean_back = float(vals[~fore].mean())
        if mean_back == 0.0:
            break
        t_next = (mean_back - mean_fore) / (math.log(mean_back) - math.log(mean_fore))
    threshold = t_next + lo
    return threshold, img > threshold


def dice(a, b) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks score 1."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def _safe_mask(img):
    try:
        return li_threshold(img)[1]
    except DegenerateImageError:
        return np.zeros(img.shape, dtype=bool)


def preprocess_pair(source, target, scale: float, *, match: bool = True,
                    invert: bool = True) -> PreprocessedPair:
    """Run the preprocessing chain on full-resolution grayscale images.

    Both images are decimated by the *same* ``scale`` so that one working
    pixel means the same physical size in each.  Inversion happens before the
    zero padding so that padding looks like (dark) background.  Masks are
    thresholded on the unmatched images: quantile matching between sections
    with different tissue fractions pushes background pixels into the tissue
    range, which Li's threshold would then pick up.
    """
    src = resize_by_scale(source, scale)
    tgt = resize_by_scale(target, scale)
    src_m, tgt_m = entropy_ordered_match(src, tgt) if match else (src, tgt)
    if invert:
        src, tgt, src_m, tgt_m = (invert_intensity(x) for x in (src, tgt, src_m, tgt_m))
    src, tgt = pad_to_common(src, tgt)
    src_m, tgt_m = pad_to_common(src_m, tgt_m)
    return PreprocessedPair(
        source=src_m,
        target=tgt_m,
        source_mask=_safe_mask(src),
        target_mask=_safe_mask(tgt),
        scale_to_full=max(1.0, float(scale)),
        histogram_matched=match,
        inverted=invert,
        source_raw=src,
        target_raw=tgt,
    )
