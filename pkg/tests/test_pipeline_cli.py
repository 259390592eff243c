import json

import numpy as np
import pytest

from histreg.cli import main
from histreg.config import PipelineConfig
from histreg.decision import masked_mind_ssd
from histreg.evaluation import LandmarkSet
from histreg.imgcore import Affine2D, read_dfl, warp_image
from histreg.io import PairRecord, read_image, write_png
from histreg.pipeline import register_arrays, render_checkerboard, run_batch, run_pair, stage_scale
from histreg.preprocess import ResolutionPolicy, preprocess_pair
from histreg.synthetic import landmarks_in_mask, random_texture, tissue_image, warped_pair

SIZE = 256


def _without_timings(report):
    report = dict(report)
    report.pop("timings_ms", None)
    for entry in report.get("pairs", []):
        entry.pop("timings_ms", None)
    return report


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    """Three pairs on disk: identity, warped and unrelated, with landmarks."""
    root = tmp_path_factory.mktemp("data")
    rows = ["pair_id,source,target,source_landmarks,target_landmarks"]

    def add(pid, src, tgt, tgt_pts, src_pts):
        write_png(root / f"{pid}_s.png", src)
        write_png(root / f"{pid}_t.png", tgt)
        LandmarkSet.from_points(src_pts).write_csv(root / f"{pid}_ls.csv")
        LandmarkSet.from_points(tgt_pts).write_csv(root / f"{pid}_lt.csv")
        rows.append(f"{pid},{pid}_s.png,{pid}_t.png,{pid}_ls.csv,{pid}_lt.csv")

    img = tissue_image(SIZE, seed=2)
    pts = landmarks_in_mask(img < 0.8, 20, seed=1, margin=20)
    add("same", img, img, pts, pts)

    pair = warped_pair(SIZE, seed=5, amplitude=6.0, contrast=0.9, brightness=0.05,
                       affine=Affine2D.about((127.5, 127.5), angle=0.15, shift=(6, -4)))
    tpts = landmarks_in_mask(pair.target < 0.8, 20, seed=2, margin=20)
    from histreg.imgcore import warp_points

    add("warped", pair.source, pair.target, tpts, warp_points(pair.truth, tpts))
    add("unrelated", random_texture(SIZE, 1), random_texture(SIZE, 2), pts[:5], pts[:5] + 3)
    (root / "pairs.csv").write_text("\n".join(rows) + "\n")
    return root


@pytest.fixture(scope="module")
def batch_run(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("out")
    report, code = run_batch(dataset / "pairs.csv", PipelineConfig(), out)
    return out, report, code


class TestCheckerboard:
    def test_same_image(self, rng):
        a = rng.random((20, 30))
        assert np.array_equal(render_checkerboard(a, a, 7), a)

    def test_black_white(self):
        out = render_checkerboard(np.zeros((16, 24)), np.ones((16, 24)), 8)
        r, c = np.mgrid[0:16, 0:24]
        assert np.array_equal(out, ((r // 8 + c // 8) % 2).astype(float))

    def test_tile_equals_width(self):
        out = render_checkerboard(np.zeros((12, 6)), np.ones((12, 6)), 6)
        assert np.array_equal(out[:, 0], np.repeat([0.0, 1.0], 6))
        assert np.all(out == out[:, :1])

    def test_errors(self):
        with pytest.raises(ValueError):
            render_checkerboard(np.zeros((3, 3)), np.zeros((3, 4)))
        with pytest.raises(ValueError):
            render_checkerboard(np.zeros((3, 3)), np.zeros((3, 3)), 0)


def test_stage_scale_uses_common_extent():
    assert stage_scale((100, 300), (400, 200), ResolutionPolicy("max_side", 200)) == 2.0
    assert stage_scale((100, 300), (400, 200), ResolutionPolicy("min_side", 500)) == 1.0


class TestBatch:
    def test_outcomes(self, batch_run):
        out, report, code = batch_run
        assert code == 0 and report["n_pairs"] == 3 and report["n_failed"] == 0
        by_id = {p["pair_id"]: p for p in report["pairs"]}
        assert by_id["same"]["median_rtre"] < 0.001
        assert by_id["warped"]["median_rtre"] < 0.005
        assert by_id["unrelated"]["status"] == "fail_detected"
        assert by_id["unrelated"]["selected"] == "initial_only"
        medians = [p["median_rtre"] for p in report["pairs"]]
        assert report["average_median_rtre"] == pytest.approx(np.mean(medians), rel=1e-12)

    def test_artifacts(self, batch_run):
        out, _, _ = batch_run
        for pid in ("same", "warped", "unrelated"):
            for name in ("field.dfl", "report.json", "checkerboard.png", "warped_source_landmarks.csv"):
                assert (out / pid / name).is_file()
        rep = json.loads((out / "warped" / "report.json").read_text())
        assert {"pair_id", "status", "initial", "candidates", "selected", "eval", "timings_ms"} <= set(rep)
        assert rep["initial"]["status"] == "ok"
        assert {c["method"] for c in rep["candidates"]} == {"local_affine", "mind_demons", "demons", "tps",
                                                            "initial_only"}
        scores = [c["mind_ssd"] for c in rep["candidates"]]
        assert rep["selected_mind_ssd"] == min(scores)

    def test_reported_score_matches_stored_field(self, dataset, batch_run):
        out, _, _ = batch_run
        rep = json.loads((out / "warped" / "report.json").read_text())
        field = read_dfl(out / "warped" / "field.dfl")
        src = read_image(dataset / "warped_s.png")
        tgt = read_image(dataset / "warped_t.png")
        pp = preprocess_pair(src, tgt, rep["field"]["scale_to_full"])
        mask = pp.target_mask if pp.target_mask.any() else np.ones(pp.target.shape, bool)
        score = masked_mind_ssd(pp.target_raw, warp_image(pp.source_raw, field), mask)
        assert score == pytest.approx(rep["selected_mind_ssd"], abs=1e-6)

    def test_deterministic(self, dataset, batch_run, tmp_path):
        out, report, _ = batch_run
        report2, _ = run_batch(dataset / "pairs.csv", PipelineConfig(), tmp_path)
        assert _without_timings(report2) == _without_timings(report)
        for pid in ("same", "warped", "unrelated"):
            assert (tmp_path / pid / "field.dfl").read_bytes() == (out / pid / "field.dfl").read_bytes()
            a = _without_timings(json.loads((out / pid / "report.json").read_text()))
            b = _without_timings(json.loads((tmp_path / pid / "report.json").read_text()))
            assert a == b

    def test_header_only(self, tmp_path):
        p = tmp_path / "empty.csv"
        p.write_text("pair_id,source,target\n")
        report, code = run_batch(p, PipelineConfig(), tmp_path / "o")
        assert code == 0 and report["n_pairs"] == 0 and report["pairs"] == []

    def test_bad_path_is_partial_failure(self, dataset, tmp_path):
        p = dataset / "partial.csv"
        p.write_text("pair_id,source,target\n"
                     "same,same_s.png,same_t.png\n"
                     "ghost,nope.png,same_t.png\n"
                     "same2,same_s.png,same_t.png\n")
        report, code = run_batch(p, PipelineConfig(), tmp_path)
        assert code == 2
        assert report["n_succeeded"] == 2 and report["n_failed"] == 1
        assert report["errors"][0]["pair_id"] == "ghost"


def test_engine_failure_is_isolated(monkeypatch):
    import histreg.pipeline as pl

    def boom(*a, **k):
        raise RuntimeError("engine exploded")

    monkeypatch.setattr(pl, "demons_register", boom)
    img = tissue_image(128, seed=3)
    outcome = register_arrays(img, img, PipelineConfig())
    assert "demons" in outcome.engine_errors
    assert "demons" not in {c.method for c in outcome.candidates}
    assert outcome.selected.mind_ssd < 1e-12


def test_run_pair_without_landmarks(dataset, tmp_path):
    rec = PairRecord("nolm", str(dataset / "same_s.png"), str(dataset / "same_t.png"))
    outcome = run_pair(rec, PipelineConfig(engines=("demons",)), tmp_path)
    assert outcome.evaluation is None
    assert not (tmp_path / "nolm" / "warped_source_landmarks.csv").exists()
    assert json.loads((tmp_path / "nolm" / "report.json").read_text())["eval"] is None


class TestCli:
    def test_register_and_follow_ups(self, dataset, tmp_path, capsys):
        d = dataset
        code = main(["register", "--source", str(d / "warped_s.png"), "--target", str(d / "warped_t.png"),
                     "--landmarks", str(d / "warped_ls.csv"), str(d / "warped_lt.csv"),
                     "--output-dir", str(tmp_path), "--seed", "3", "--pair-id", "p1"])
        assert code == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["pair_id"] == "p1" and summary["eval"]["median_rtre"] < 0.005
        field = tmp_path / "p1" / "field.dfl"
        code = main(["evaluate", "--field", str(field), "--landmarks", str(d / "warped_ls.csv"),
                     str(d / "warped_lt.csv"), "--target", str(d / "warped_t.png"),
                     "--output-dir", str(tmp_path / "ev")])
        assert code == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["median_rtre"] == pytest.approx(summary["eval"]["median_rtre"], rel=1e-6)
        code = main(["visualize", "--source", str(d / "warped_s.png"), "--target", str(d / "warped_t.png"),
                     "--field", str(field), "--tile", "32", "--output-dir", str(tmp_path / "vis")])
        assert code == 0
        assert read_image(tmp_path / "vis" / "checkerboard.png").shape == (SIZE, SIZE)

    def test_batch_exit_codes(self, dataset, tmp_path, capsys):
        p = dataset / "cli_partial.csv"
        p.write_text("pair_id,source,target\nok,same_s.png,same_t.png\nbad,missing.png,same_t.png\n")
        assert main(["batch", "--pairs", str(p), "--output-dir", str(tmp_path)]) == 2
        assert main(["batch", "--pairs", str(tmp_path / "none.csv")]) == 1

    def test_fatal_errors(self, tmp_path, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1
        bad = tmp_path / "cfg.json"
        bad.write_text('{"demons.levels": 0}')
        assert main(["register", "--source", "a.png", "--target", "b.png", "--config", str(bad)]) == 1
        assert main(["register", "--source", str(tmp_path / "a.png"), "--target", "b.png"]) == 1

    def test_config_file_is_used(self, dataset, tmp_path, capsys):
        cfg = PipelineConfig(engines=("tps",), output_dir=str(tmp_path / "from_cfg"))
        cfg.save(tmp_path / "cfg.json")
        code = main(["register", "--source", str(dataset / "same_s.png"), "--target",
                     str(dataset / "same_t.png"), "--config", str(tmp_path / "cfg.json")])
        assert code == 0
        rep = json.loads((tmp_path / "from_cfg" / "same_s" / "report.json").read_text())
        assert {c["method"] for c in rep["candidates"]} == {"tps", "initial_only"}
