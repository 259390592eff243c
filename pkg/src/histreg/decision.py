"""Pick the best registration candidate by masked MIND SSD."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import DisplacementField, as_image, warp_image
from .nonrigid.mind import descriptor_ssd, mind_descriptor
from .preprocess import dice

__all__ = ["METHODS", "RegistrationResult", "masked_mind_ssd", "select_best", "score_field"]

# also the tie-break order: earlier wins
METHODS = ("local_affine", "mind_demons", "demons", "tps", "initial_only")


@dataclass(frozen=True)
class RegistrationResult:
    method: str
    field: DisplacementField
    mind_ssd: float
    dice_after: float = math.nan

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if not (math.isfinite(self.mind_ssd) and self.mind_ssd >= 0):
            raise ValueError("mind_ssd must be finite and non-negative")


def masked_mind_ssd(fixed, warped_moving, mask, fixed_descriptor=None) -> float:
    """Mean over ``mask`` of the per-pixel MIND descriptor SSD.

    ``fixed_descriptor`` may carry a precomputed ``mind_descriptor(fixed)``.
    """
    fixed = as_image(fixed)
    warped_moving = as_image(warped_moving)
    mask = np.asarray(mask, dtype=bool)
    if fixed.shape != warped_moving.shape or mask.shape != fixed.shape:
        raise ValueError("fixed, warped moving and mask must share dimensions")
    if not mask.any():
        raise ValueError("empty mask")
    fd = mind_descriptor(fixed) if fixed_descriptor is None else fixed_descriptor
    ssd = descriptor_ssd(fd, mind_descriptor(warped_moving))
    return float(ssd[mask].mean())


def score_field(method: str, field: DisplacementField, fixed, moving, fixed_mask,
                moving_mask=None, fixed_descriptor=None) -> RegistrationResult:
    """Warp ``moving`` with ``field`` and score it against ``fixed``."""
    warped = warp_image(moving, field)
    d = math.nan
    if moving_mask is not None:
        d = dice(fixed_mask, warp_image(np.asarray(moving_mask, dtype=np.float64), field, "nearest") > 0.5)
    return RegistrationResult(method, field, masked_mind_ssd(fixed, warped, fixed_mask, fixed_descriptor), d)


def select_best(candidates) -> tuple[int, RegistrationResult]:
    """Index and value of the lowest score; ties go to the earlier method in
    :data:`METHODS`, then to the earlier list position."""
    candidates = list(candidates)
    if not candidates:
        raise ValueError("no candidates to choose from")
    idx = min(range(len(candidates)),
              key=lambda i: (candidates[i].mind_ssd, METHODS.index(candidates[i].method), i))
    return idx, candidates[idx]
