"""Command line interface: ``histreg register|batch|evaluate|visualize``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, PipelineConfig
from .evaluation import LandmarkSet, image_diagonal, pair_summary, rtre
from .imgcore import invert_points, read_dfl, warp_image
from .io import PairRecord, read_image, write_png
from .pipeline import render_checkerboard, run_batch, run_pair
from .preprocess import pad_to_common, resize_by_scale

log = logging.getLogger("histreg")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_FATAL, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", type=Path, help="flat JSON configuration file")
    p.add_argument("--seed", type=int, help="random seed (overrides the configuration)")
    p.add_argument("--output-dir", type=Path, help="where results are written")
    p.add_argument("--jobs", type=int, help="pairs processed in parallel")
    p.add_argument("--tile", type=int, help="checkerboard tile size in pixels")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="histreg", description="Register histology-like image pairs.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    reg = sub.add_parser("register", parents=[common], help="register one pair")
    reg.add_argument("--source", required=True, type=Path)
    reg.add_argument("--target", required=True, type=Path)
    reg.add_argument("--landmarks", nargs="+", type=Path, metavar="CSV",
                     help="source landmarks, optionally followed by target landmarks")
    reg.add_argument("--pair-id", default=None)

    bat = sub.add_parser("batch", parents=[common], help="register every pair of a CSV list")
    bat.add_argument("--pairs", required=True, type=Path)

    ev = sub.add_parser("evaluate", parents=[common], help="landmark errors of a stored field")
    ev.add_argument("--field", required=True, type=Path)
    ev.add_argument("--landmarks", nargs=2, required=True, type=Path, metavar=("SOURCE", "TARGET"))
    ev.add_argument("--target", required=True, type=Path, help="full-resolution target image")
    ev.add_argument("--scale", type=float, default=None,
                    help="full-resolution pixels per field pixel (default: from the sizes)")

    vis = sub.add_parser("visualize", parents=[common], help="checkerboard of two images")
    vis.add_argument("--source", required=True, type=Path)
    vis.add_argument("--target", required=True, type=Path)
    vis.add_argument("--field", type=Path, help="warp the source with this field first")
    vis.add_argument("--scale", type=float, default=None)
    return parser


def _config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.output_dir is not None:
        changes["output_dir"] = str(args.output_dir)
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    if args.tile is not None:
        changes["tile"] = args.tile
    return cfg.replace(**changes) if changes else cfg


def _field_scale(field, width, height, scale):
    if scale is not None:
        if scale <= 0:
            raise ValueError("--scale must be positive")
        return scale
    return max(1.0, max(width, height) / max(field.width, field.height))


def _fit(img, shape):
    """Zero-pad or crop on the right/bottom to ``shape``."""
    out = np.zeros(shape)
    h = min(shape[0], img.shape[0])
    w = min(shape[1], img.shape[1])
    out[:h, :w] = img[:h, :w]
    return out


def _cmd_register(args, cfg) -> int:
    lms = args.landmarks or []
    if len(lms) > 2:
        raise ValueError("--landmarks takes at most two files")
    rec = PairRecord(args.pair_id or args.source.stem, str(args.source), str(args.target),
                     str(lms[0]) if lms else None, str(lms[1]) if len(lms) > 1 else None)
    outcome = run_pair(rec, cfg, cfg.output_dir)
    summary = {k: v for k, v in outcome.report().items() if k in ("pair_id", "status", "selected", "eval")}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def _cmd_batch(args, cfg) -> int:
    if not args.pairs.is_file():
        raise FileNotFoundError(f"pair list {args.pairs} not found")
    report, code = run_batch(args.pairs, cfg, cfg.output_dir)
    print(json.dumps({k: report[k] for k in ("n_pairs", "n_succeeded", "n_failed",
                                              "average_median_rtre")}, sort_keys=True))
    return code


def _cmd_evaluate(args, cfg) -> int:
    field = read_dfl(args.field)
    tgt = read_image(args.target)
    h, w = tgt.shape
    s = _field_scale(field, w, h, args.scale)
    src_lm = LandmarkSet.read_csv(args.landmarks[0])
    tgt_lm = LandmarkSet.read_csv(args.landmarks[1])
    warped = src_lm.with_points(invert_points(field, src_lm.points / s) * s)
    diag = image_diagonal(w, h)
    ev = pair_summary(rtre(src_lm, tgt_lm, diag), rtre(warped, tgt_lm, diag), diag)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    warped.write_csv(out / "warped_source_landmarks.csv")
    print(json.dumps(ev.to_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_visualize(args, cfg) -> int:
    src = read_image(args.source)
    tgt = read_image(args.target)
    if args.field is not None:
        field = read_dfl(args.field)
        s = _field_scale(field, *tgt.shape[::-1], args.scale)
        src = warp_image(_fit(resize_by_scale(src, s), field.shape), field)
        tgt = _fit(resize_by_scale(tgt, s), field.shape)
    else:
        src, tgt = pad_to_common(src, tgt)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "checkerboard.png"
    write_png(path, render_checkerboard(tgt, src, cfg.tile))
    print(path)
    return EXIT_OK


COMMANDS = {"register": _cmd_register, "batch": _cmd_batch, "evaluate": _cmd_evaluate,
            "visualize": _cmd_visualize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, OSError, ValueError) as exc:
        log.error("%s", exc)
        return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
