"""End-to-end registration of one pair or a batch of pairs."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .decision import RegistrationResult, score_field, select_best
from .evaluation import LandmarkSet, PairEvaluation, image_diagonal, median, pair_summary, rtre
from .imgcore import (Affine2D, DisplacementField, affine_to_field, as_image, invert_points,
                      resample_field, warp_image, write_dfl)
from .initial_align import InitialAlignmentResult, initial_alignment
from .io import PairRecord, read_image, read_pairs_csv, write_png
from .nonrigid import (demons_register, local_affine_register, mind_demons_register,
                       mind_descriptor, tps_from_matches, tps_to_field)
from .preprocess import PreprocessedPair, ResolutionPolicy, policy_scale, preprocess_pair

log = logging.getLogger(__name__)

__all__ = ["PairOutcome", "register_arrays", "run_pair", "run_batch", "render_checkerboard",
           "stage_scale"]


@dataclass
class PairOutcome:
    pair_id: str
    status: str
    initial: InitialAlignmentResult
    initial_scale: float
    candidates: list
    selected_index: int
    scale_to_full: float
    evaluation: PairEvaluation | None = None
    warped_landmarks: LandmarkSet | None = None
    engine_errors: dict = field(default_factory=dict)
    timings_ms: dict = field(default_factory=dict)
    checkerboard: np.ndarray | None = None

    @property
    def selected(self) -> RegistrationResult:
        return self.candidates[self.selected_index]

    def report(self) -> dict:
        """JSON-ready summary; everything except ``timings_ms`` is deterministic."""
        return {
            "pair_id": self.pair_id,
            "status": self.status,
            "initial": {
                "method": self.initial.method,
                "status": self.initial.status,
                "dice": self.initial.dice_score,
                "detector_kind": self.initial.detector_kind,
                "transform": self.initial.transform.to_list(),
                "scale_to_full": self.initial_scale,
            },
            "candidates": [{"method": c.method, "mind_ssd": c.mind_ssd, "dice_after": _num(c.dice_after)}
                           for c in self.candidates],
            "selected": self.selected.method,
            "selected_mind_ssd": self.selected.mind_ssd,
            "engine_errors": dict(sorted(self.engine_errors.items())),
            "field": {"width": self.selected.field.width, "height": self.selected.field.height,
                      "scale_to_full": self.scale_to_full},
            "eval": self.evaluation.to_dict() if self.evaluation else None,
            "timings_ms": self.timings_ms,
        }


def _num(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


class _Timer:
    def __init__(self, sink, key):
        self.sink, self.key = sink, key

    def __enter__(self):
        self.t0 = time.perf_counter()

    def __exit__(self, *exc):
        self.sink[self.key] = round(1000.0 * (time.perf_counter() - self.t0), 3)


def stage_scale(src_shape, tgt_shape, policy: ResolutionPolicy) -> float:
    """Decimation factor for a stage, from the padded common extent."""
    h = max(src_shape[0], tgt_shape[0])
    w = max(src_shape[1], tgt_shape[1])
    return policy_scale(w, h, policy)


def render_checkerboard(a, b, tile: int = 64) -> np.ndarray:
    """Alternate ``tile`` x ``tile`` blocks of ``a`` (even blocks) and ``b``."""
    a = as_image(a)
    b = as_image(b)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    if tile < 1:
        raise ValueError("tile must be >= 1")
    rows = np.arange(a.shape[0]) // tile
    cols = np.arange(a.shape[1]) // tile
    use_a = (rows[:, None] + cols[None, :]) % 2 == 0
    return np.where(use_a, a, b)


def _run_engine(name, pp: PreprocessedPair, init: DisplacementField, initial, scale_ratio, cfg):
    if name == "local_affine":
        return local_affine_register(pp.target, pp.source, init, cfg.local_affine)
    if name == "demons":
        return demons_register(pp.target, pp.source, init, cfg.demons)
    if name == "mind_demons":
        return mind_demons_register(pp.target_raw, pp.source_raw, init, cfg.mind_demons)
    if name == "tps":
        model = tps_from_matches(initial.good_matches, cfg.tps.lam, cfg.tps.snap, cfg.tps.max_points,
                                 scale=scale_ratio)
        return tps_to_field(model, init.width, init.height, cfg.tps.grid_step)
    raise ValueError(f"unknown engine {name!r}")


def register_arrays(source, target, cfg: PipelineConfig | None = None, *, pair_id: str = "pair",
                    source_landmarks: LandmarkSet | None = None,
                    target_landmarks: LandmarkSet | None = None) -> PairOutcome:
    """Register full-resolution grayscale ``source`` onto ``target``.

    The returned field lives on the decision grid (``scale_to_full`` full
    pixels per grid pixel) and maps target positions to source positions.
    """
    cfg = cfg or PipelineConfig()
    source = as_image(source)
    target = as_image(target)
    timings: dict = {}
    t_start = time.perf_counter()
    cache: dict = {}

    def prepared(policy):
        s = stage_scale(source.shape, target.shape, policy)
        if s not in cache:
            cache[s] = preprocess_pair(source, target, s)
        return s, cache[s]

    with _Timer(timings, "preprocess"):
        s0, pp0 = prepared(cfg.resolution.initial)
    with _Timer(timings, "initial_alignment"):
        initial = initial_alignment(pp0, cfg.align_params())

    fields: dict = {}
    errors: dict = {}
    if initial.status == "ok":
        jobs = []
        with _Timer(timings, "preprocess_engines"):
            for name in cfg.engines:
                s, pp = prepared(getattr(cfg.resolution, name))
                a = initial.transform.scaled(s0 / s)
                h, w = pp.target.shape
                jobs.append((name, s, pp, affine_to_field(a, w, h)))

        def work(job):
            name, s, pp, init = job
            t0 = time.perf_counter()
            try:
                out = _run_engine(name, pp, init, initial, s / s0, cfg)
            except Exception as exc:  # one engine failing must not sink the pair
                log.warning("%s: engine %s failed: %s", pair_id, name, exc)
                out = exc
            return name, s, out, round(1000.0 * (time.perf_counter() - t0), 3)

        with ThreadPoolExecutor(max_workers=min(cfg.engine_workers, max(len(jobs), 1))) as pool:
            for name, s, out, ms in pool.map(work, jobs):
                timings[f"engine_{name}"] = ms
                if isinstance(out, Exception):
                    errors[name] = f"{type(out).__name__}: {out}"
                else:
                    fields[name] = (s, out)

    with _Timer(timings, "decision"):
        sd, ppd = prepared(cfg.resolution.decision)
        hd, wd = ppd.target.shape
        mask = ppd.target_mask if ppd.target_mask.any() else np.ones((hd, wd), dtype=bool)
        grid = {"initial_only": affine_to_field(initial.transform.scaled(s0 / sd), wd, hd)}
        for name in cfg.engines:
            if name in fields:
                s, f = fields[name]
                grid[name] = f if (s == sd and f.shape == (hd, wd)) else resample_field(f, wd, hd, factor=sd / s)
        fdesc = mind_descriptor(ppd.target_raw)
        candidates = [score_field(name, f.as_float32(), ppd.target_raw, ppd.source_raw, mask,
                                  ppd.source_mask, fdesc)
                      for name, f in grid.items()]
        # keep a stable, documented order in reports
        order = {"initial_only": len(cfg.engines)}
        order.update({n: i for i, n in enumerate(cfg.engines)})
        candidates.sort(key=lambda c: order[c.method])
        idx, best = select_best(candidates)

    outcome = PairOutcome(pair_id, initial.status, initial, s0, candidates, idx, sd,
                          engine_errors=errors, timings_ms=timings)

    with _Timer(timings, "evaluation"):
        if source_landmarks is not None:
            q = source_landmarks.points / sd
            warped = LandmarkSet(source_landmarks.ids, invert_points(best.field, q) * sd)
            outcome.warped_landmarks = warped
            if target_landmarks is not None:
                diag = image_diagonal(target.shape[1], target.shape[0])
                before = rtre(source_landmarks, target_landmarks, diag)
                after = rtre(warped, target_landmarks, diag)
                outcome.evaluation = pair_summary(before, after, diag)
        moved = warp_image(ppd.source_raw, best.field)
        fixed_view = 1.0 - ppd.target_raw if ppd.inverted else ppd.target_raw
        moved_view = 1.0 - moved if ppd.inverted else moved
        outcome.checkerboard = render_checkerboard(fixed_view, moved_view, cfg.tile)
    timings["total"] = round(1000.0 * (time.perf_counter() - t_start), 3)
    return outcome


def write_outcome(outcome: PairOutcome, out_dir) -> Path:
    out = Path(out_dir) / outcome.pair_id
    out.mkdir(parents=True, exist_ok=True)
    write_dfl(out / "field.dfl", outcome.selected.field)
    if outcome.warped_landmarks is not None:
        outcome.warped_landmarks.write_csv(out / "warped_source_landmarks.csv")
    if outcome.checkerboard is not None:
        write_png(out / "checkerboard.png", outcome.checkerboard)
    (out / "report.json").write_text(json.dumps(outcome.report(), indent=2, sort_keys=True) + "\n")
    return out


def run_pair(rec: PairRecord, cfg: PipelineConfig | None = None, out_dir=None) -> PairOutcome:
    """Read a pair from disk, register it and write its artifacts."""
    cfg = cfg or PipelineConfig()
    src = read_image(rec.source)
    tgt = read_image(rec.target)
    src_lm = LandmarkSet.read_csv(rec.source_landmarks) if rec.source_landmarks else None
    tgt_lm = LandmarkSet.read_csv(rec.target_landmarks) if rec.target_landmarks else None
    outcome = register_arrays(src, tgt, cfg, pair_id=rec.pair_id, source_landmarks=src_lm,
                              target_landmarks=tgt_lm)
    write_outcome(outcome, out_dir if out_dir is not None else cfg.output_dir)
    return outcome


def run_batch(csv_path, cfg: PipelineConfig | None = None, out_dir=None):
    """Register every pair in ``csv_path``.

    Returns ``(report, exit_code)`` with exit code 0 when every row
    succeeded and 2 when some rows or pairs failed.  A failing pair is
    recorded and the batch carries on.
    """
    cfg = cfg or PipelineConfig()
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records, row_errors = read_pairs_csv(csv_path)
    errors = [{"line": line, "error": msg} for line, msg in row_errors]
    for e in errors:
        log.error("%s:%d: %s", csv_path, e["line"], e["error"])

    def one(rec):
        try:
            return rec, run_pair(rec, cfg, out_dir), None
        except Exception as exc:
            log.error("pair %s failed: %s", rec.pair_id, exc)
            return rec, None, f"{type(exc).__name__}: {exc}"

    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        results = list(pool.map(one, records))

    pairs = []
    medians, improved = [], []
    for rec, outcome, err in results:
        if err is not None:
            errors.append({"pair_id": rec.pair_id, "error": err})
            continue
        entry = {"pair_id": rec.pair_id, "status": outcome.status, "selected": outcome.selected.method,
                 "median_rtre": None, "timings_ms": outcome.timings_ms}
        if outcome.evaluation is not None:
            entry["median_rtre"] = outcome.evaluation.median_rtre
            medians.append(outcome.evaluation.median_rtre)
            improved.append(outcome.evaluation.improved)
        pairs.append(entry)
    report = {
        "n_pairs": len(records) + len(row_errors),
        "n_succeeded": len(pairs),
        "n_failed": len(errors),
        "average_median_rtre": float(np.mean(medians)) if medians else None,
        "median_of_median_rtre": median(medians) if medians else None,
        "improved_pair_fraction": float(np.mean(improved)) if improved else None,
        "pairs": pairs,
        "errors": errors,
    }
    (out_dir / "batch_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report, (2 if errors else 0)
