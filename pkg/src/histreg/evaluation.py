"""Landmark error metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = ["LandmarkSet", "PairEvaluation", "image_diagonal", "rtre", "median", "pair_summary",
           "scale_landmarks"]


@dataclass(frozen=True)
class LandmarkSet:
    ids: tuple
    points: np.ndarray  # (n, 2) full-resolution (x, y)

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        if len(ids) != len(pts):
            raise ValueError("one id per landmark is required")
        if len(set(ids)) != len(ids):
            raise ValueError("landmark ids must be unique")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmark coordinates must be finite")
        pts.setflags(write=False)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_points(cls, pts) -> LandmarkSet:
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return cls(tuple(range(len(pts))), pts)

    def with_points(self, pts) -> LandmarkSet:
        return LandmarkSet(self.ids, pts)

    @classmethod
    def read_csv(cls, path) -> LandmarkSet:
        """Read ``id,x,y`` rows after a header line.

        A leading unnamed index column (``,X,Y`` headers) is accepted too.
        """
        ids, pts = [], []
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
        if not rows:
            raise ValueError(f"{path}: empty landmark file")
        for n, row in enumerate(rows[1:], start=2):
            if len(row) < 3:
                raise ValueError(f"{path}:{n}: expected id,x,y")
            try:
                ids.append(int(float(row[0])))
                pts.append((float(row[1]), float(row[2])))
            except ValueError as exc:
                raise ValueError(f"{path}:{n}: {exc}") from None
        return cls(tuple(ids), np.array(pts, dtype=np.float64).reshape(-1, 2))

    def write_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["id", "x", "y"])
            for i, (x, y) in zip(self.ids, self.points):
                w.writerow([i, repr(float(x)), repr(float(y))])


@dataclass(frozen=True)
class PairEvaluation:
    rtre_per_landmark: tuple
    median_rtre: float
    mean_rtre: float
    max_rtre: float
    improved_fraction: float
    diagonal: float = math.nan
    median_before: float = math.nan

    @property
    def improved(self) -> bool:
        """Pair-level flag: the median error went down."""
        return self.median_rtre < self.median_before

    def to_dict(self) -> dict:
        return {
            "median_rtre": self.median_rtre,
            "mean_rtre": self.mean_rtre,
            "max_rtre": self.max_rtre,
            "improved_fraction": self.improved_fraction,
            "median_rtre_before": self.median_before,
            "improved": bool(self.improved),
            "diagonal": self.diagonal,
            "n_landmarks": len(self.rtre_per_landmark),
        }


def image_diagonal(width: float, height: float) -> float:
    return math.hypot(width, height)


def _coords(x):
    if isinstance(x, LandmarkSet):
        return x.points, x.ids
    return np.asarray(x, dtype=np.float64).reshape(-1, 2), None


def rtre(warped_src, tgt, diagonal: float) -> np.ndarray:
    """Per-landmark distance divided by the image diagonal."""
    if not diagonal > 0:
        raise ValueError("diagonal must be positive")
    a, ia = _coords(warped_src)
    b, ib = _coords(tgt)
    if len(a) != len(b):
        raise ValueError(f"landmark count mismatch: {len(a)} vs {len(b)}")
    if ia is not None and ib is not None and ia != ib:
        raise ValueError("landmark ids do not match")
    return np.hypot(a[:, 0] - b[:, 0], a[:, 1] - b[:, 1]) / diagonal


def median(values) -> float:
    """Median; even lengths average the two central values."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("median of an empty sequence")
    mid = v.size // 2
    return float(v[mid]) if v.size % 2 else float(0.5 * (v[mid - 1] + v[mid]))


def pair_summary(rtres_before, rtres_after, diagonal: float = math.nan) -> PairEvaluation:
    before = np.asarray(rtres_before, dtype=np.float64).ravel()
    after = np.asarray(rtres_after, dtype=np.float64).ravel()
    if after.size == 0:
        raise ValueError("no landmarks to summarise")
    if before.size != after.size:
        raise ValueError("before/after landmark counts differ")
    return PairEvaluation(
        rtre_per_landmark=tuple(float(x) for x in after),
        median_rtre=median(after),
        mean_rtre=float(after.mean()),
        max_rtre=float(after.max()),
        improved_fraction=float(np.count_nonzero(after < before)) / after.size,
        diagonal=float(diagonal),
        median_before=median(before),
    )


def scale_landmarks(pts, scale: float):
    """Multiply coordinates by ``scale``; keeps :class:`LandmarkSet` ids."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    if isinstance(pts, LandmarkSet):
        return pts.with_points(pts.points * scale)
    return np.asarray(pts, dtype=np.float64) * scale
