"""Image and pair-list input/output."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import tifffile
from PIL import Image as PILImage

from .preprocess import to_grayscale

__all__ = ["ImageReadError", "PairRecord", "read_image", "write_png", "read_pairs_csv"]

PAIR_COLUMNS = ("pair_id", "source", "target", "source_landmarks", "target_landmarks")


class ImageReadError(OSError):
    pass


def _normalise(arr: np.ndarray) -> np.ndarray:
    if arr.dtype == np.uint8:
        out = arr.astype(np.float64) / 255.0
    elif arr.dtype == np.uint16:
        out = arr.astype(np.float64) / 65535.0
    elif arr.dtype == bool:
        out = arr.astype(np.float64)
    elif np.issubdtype(arr.dtype, np.integer):
        # PIL reports 16-bit PNGs as 32-bit integer images
        out = arr.astype(np.float64) / (255.0 if arr.max(initial=0) <= 255 else 65535.0)
    else:
        out = arr.astype(np.float64)
    if out.ndim == 3:
        if out.shape[2] in (1, 2):
            out = out[..., 0]
        else:
            out = to_grayscale(out[..., :3])
    if out.ndim != 2:
        raise ImageReadError(f"unsupported image shape {arr.shape}")
    return np.clip(out, 0.0, 1.0)


def read_image(path) -> np.ndarray:
    """Grayscale float64 image in [0, 1] from PNG, JPEG or TIFF."""
    path = Path(path)
    try:
        if path.suffix.lower() in (".tif", ".tiff"):
            arr = tifffile.imread(path)
            if arr.ndim == 3 and arr.shape[0] in (3, 4) and arr.shape[2] not in (3, 4):
                arr = np.moveaxis(arr, 0, -1)
        else:
            with PILImage.open(path) as im:
                if im.mode in ("P", "PA", "CMYK", "YCbCr", "LAB", "HSV"):
                    im = im.convert("RGB")
                arr = np.array(im)
    except (OSError, ValueError) as exc:
        raise ImageReadError(f"cannot read image {path}: {exc}") from None
    return _normalise(arr)


def write_png(path, img) -> None:
    """Save an image in [0, 1] as 8-bit grayscale."""
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr).save(path, format="PNG")


@dataclass(frozen=True)
class PairRecord:
    pair_id: str
    source: str
    target: str
    source_landmarks: str | None = None
    target_landmarks: str | None = None

    def __post_init__(self):
        if not self.pair_id or not self.source or not self.target:
            raise ValueError("pair_id, source and target must be non-empty")


def read_pairs_csv(path):
    """Parse a pair list; returns ``(records, errors)``.

    Malformed rows and duplicate ids become ``(line, message)`` errors
    instead of aborting.  Relative paths resolve against the CSV's folder.
    """
    path = Path(path)
    base = path.parent
    records, errors, seen = [], [], set()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            return records, errors
        missing = [c for c in PAIR_COLUMNS[:3] if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            vals = {k: (row.get(k) or "").strip() for k in PAIR_COLUMNS}
            try:
                if None in row:
                    raise ValueError("too many fields")
                rec = PairRecord(
                    vals["pair_id"],
                    str(base / vals["source"]) if vals["source"] else "",
                    str(base / vals["target"]) if vals["target"] else "",
                    str(base / vals["source_landmarks"]) if vals["source_landmarks"] else None,
                    str(base / vals["target_landmarks"]) if vals["target_landmarks"] else None,
                )
                if rec.pair_id in seen:
                    raise ValueError(f"duplicate pair_id {rec.pair_id!r}")
            except ValueError as exc:
                errors.append((line, str(exc)))
                continue
            seen.add(rec.pair_id)
            records.append(rec)
    return records, errors
