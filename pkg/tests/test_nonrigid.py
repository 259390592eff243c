import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import ndimage

from histreg.imgcore import Affine2D, DisplacementField, affine_to_field, warp_image, warp_points
from histreg.nonrigid import (
    DemonsParams,
    LocalAffineParams,
    TpsModel,
    demons_register,
    descriptor_ssd,
    local_affine_register,
    local_affine_solve,
    mind_demons_register,
    mind_descriptor,
    tps_fit,
    tps_from_matches,
    tps_to_field,
)
from histreg.nonrigid.tps import DegenerateControlPointsError
from histreg.features import Keypoint, MatchSet
from histreg.synthetic import random_texture, smooth_field, tissue_image

SIZE = 128


@pytest.fixture(scope="module")
def smooth_img():
    return ndimage.gaussian_filter(random_texture(SIZE, seed=3, sigma=3.0), 1.0)


@pytest.fixture(scope="module")
def tissue():
    return 1.0 - tissue_image(SIZE, seed=11, radius=3.0)


def _shift(img, dx, dy):
    """Content moved by (dx, dy): result(p) = img(p - d)."""
    h, w = img.shape
    return warp_image(img, DisplacementField.constant(w, h, -dx, -dy))


def _central(a):
    n = a.shape[-1] // 4
    return a[..., n:-n, n:-n]


def _ssd(a, b):
    return float(((_central(a) - _central(b)) ** 2).sum())


def _analytic(h, w, a: Affine2D | None = None):
    """Smooth analytic image, optionally sampled through ``a``."""
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    if a is not None:
        m = a.m
        xx, yy = m[0, 0] * xx + m[0, 1] * yy + m[0, 2], m[1, 0] * xx + m[1, 1] * yy + m[1, 2]
    return 0.5 + 0.2 * np.sin(xx / 7.0) * np.cos(yy / 9.0) + 0.1 * np.sin((xx + 2 * yy) / 13.0)


class TestParams:
    def test_demons_validation(self):
        with pytest.raises(ValueError):
            DemonsParams(levels=0)
        with pytest.raises(ValueError):
            DemonsParams(sigma_fluid=-1)
        with pytest.raises(ValueError):
            DemonsParams(iters_per_level=0)

    def test_local_affine_schedule(self):
        with pytest.raises(ValueError):
            LocalAffineParams(level_schedule=(64, 64))
        with pytest.raises(ValueError):
            LocalAffineParams(level_schedule=(64, 8))
        assert LocalAffineParams(level_schedule=[128, 64, 32]).level_schedule == (128, 64, 32)


class TestDemons:
    def test_identity(self, smooth_img):
        f = demons_register(smooth_img, smooth_img)
        assert f.max_magnitude() < 0.05

    def test_translation(self, smooth_img):
        moving = _shift(smooth_img, 3.0, 0.0)
        f = demons_register(smooth_img, moving)
        assert np.mean(_central(f.u)) == pytest.approx(3.0, abs=0.5)
        assert np.mean(_central(f.v)) == pytest.approx(0.0, abs=0.5)
        before = _ssd(moving, smooth_img)
        after = _ssd(warp_image(moving, f), smooth_img)
        assert after <= 0.1 * before

    def test_sinusoidal_warp(self, smooth_img):
        yy, xx = np.mgrid[0:SIZE, 0:SIZE].astype(float)
        truth = DisplacementField(5 * np.sin(2 * np.pi * yy / SIZE), 5 * np.cos(2 * np.pi * xx / SIZE))
        fixed = warp_image(smooth_img, truth)
        f = demons_register(fixed, smooth_img)
        assert _ssd(warp_image(smooth_img, f), fixed) <= 0.2 * _ssd(smooth_img, fixed)

    def test_dimension_mismatch(self, smooth_img):
        with pytest.raises(ValueError):
            demons_register(smooth_img, smooth_img[:-1])

    def test_output_shape_and_finite(self, smooth_img):
        f = demons_register(smooth_img, _shift(smooth_img, 1, 2), p=DemonsParams(levels=2, iters_per_level=5))
        assert f.shape == smooth_img.shape
        assert np.isfinite(f.u).all() and np.isfinite(f.v).all()


class TestMind:
    def test_constant_image_all_ones(self):
        assert np.array_equal(mind_descriptor(np.full((20, 20), 0.4)), np.ones((6, 20, 20)))

    def test_range_and_max(self, tissue):
        d = mind_descriptor(tissue)
        assert d.shape == (6, SIZE, SIZE)
        assert np.all(d > 0) and np.all(d <= 1)
        np.testing.assert_allclose(d.max(axis=0), 1.0)

    @given(st.floats(0.25, 4), st.floats(-0.25, 0.25))
    @settings(max_examples=25)
    def test_linear_intensity_invariance(self, a, b):
        img = random_texture(32, seed=5, sigma=1.5)
        np.testing.assert_allclose(mind_descriptor(a * img + b), mind_descriptor(img), atol=1e-5)

    def test_spec_pair_invariance(self, tissue):
        np.testing.assert_allclose(mind_descriptor(2 * tissue + 0.1), mind_descriptor(tissue), atol=1e-5)

    def test_identical_images_zero_ssd(self, tissue):
        d = mind_descriptor(tissue)
        assert descriptor_ssd(d, d).max() == 0.0

    def test_brute_force_single_pixel(self, rng):
        img = rng.random((16, 16))
        d = mind_descriptor(img)
        taps = np.array([np.exp(-2.0), 1.0, np.exp(-2.0)])
        taps /= taps.sum()
        r, c = 7, 9
        from histreg.nonrigid.mind import MIND_OFFSETS

        dist = []
        for dx, dy in MIND_OFFSETS:
            acc = 0.0
            for a in (-1, 0, 1):
                for b in (-1, 0, 1):
                    acc += taps[a + 1] * taps[b + 1] * (img[r + a, c + b] - img[r + a + dy, c + b + dx]) ** 2
            dist.append(acc)
        dist = np.array(dist)
        v = max(dist.mean(), 1e-6)
        ref = np.exp(-dist / v)
        np.testing.assert_allclose(d[:, r, c], ref / ref.max(), atol=1e-12)

    def test_too_small(self):
        with pytest.raises(ValueError):
            mind_descriptor(np.zeros((15, 40)))

    def test_mind_demons_identity(self, tissue):
        assert mind_demons_register(tissue, tissue).max_magnitude() < 0.05

    def test_inverted_contrast_translation(self, smooth_img):
        moving = 1.0 - _shift(smooth_img, 3.0, 0.0)
        f = mind_demons_register(smooth_img, moving)
        assert np.mean(_central(f.u)) == pytest.approx(3.0, abs=1.0)
        assert np.mean(_central(f.v)) == pytest.approx(0.0, abs=1.0)
        g = demons_register(smooth_img, moving)
        assert abs(np.mean(_central(g.u)) - 3.0) > 1.0


class TestLocalAffine:
    def test_identity(self, tissue):
        res = local_affine_solve(tissue, tissue)
        assert res.field.max_magnitude() < 0.05
        np.testing.assert_allclose(res.contrast, 1.0, atol=1e-3)
        np.testing.assert_allclose(res.brightness, 0.0, atol=1e-3)

    def test_intensity_and_shift(self, tissue):
        moving = 0.7 * _shift(tissue, 5.0, 0.0) + 0.15
        res = local_affine_solve(tissue, moving)
        assert np.median(_central(res.field.u)) == pytest.approx(5.0, abs=1.0)
        assert np.median(_central(res.field.v)) == pytest.approx(0.0, abs=1.0)
        # corrected moving c * m + b must undo 0.7 * f + 0.15
        assert np.median(_central(res.contrast)) == pytest.approx(1 / 0.7, rel=0.05)
        assert np.median(_central(res.brightness)) == pytest.approx(-0.15 / 0.7, abs=0.03)

    def test_blanked_region_shift(self):
        fixed = 1.0 - tissue_image(192, seed=21, radius=3.0)
        moving = _shift(fixed, 4.0, 0.0)
        occ = np.zeros_like(moving, dtype=bool)
        occ[40:126, 60:140] = True  # ~19% of the area
        moving[occ] = 0.0
        res = local_affine_solve(fixed, moving)
        occ_fixed = _shift(occ.astype(float), -4.0, 0.0) > 0.5
        keep = ~ndimage.binary_dilation(occ_fixed, iterations=4)
        keep[:10] = keep[-10:] = False
        keep[:, :10] = keep[:, -10:] = False
        err = np.hypot(res.field.u - 4.0, res.field.v)
        assert err[keep].mean() < 1.0
        inner = ndimage.binary_erosion(occ_fixed, iterations=4)
        assert res.weights[inner].mean() < 0.2

    def test_energy_history_non_increasing(self, tissue):
        truth = smooth_field(SIZE, 4.0, seed=2)
        moving = warp_image(tissue, DisplacementField(-truth.u, -truth.v))
        res = local_affine_solve(tissue, moving)
        assert res.history
        for _, before, after in res.history:
            assert after <= before

    def test_dimension_mismatch(self, tissue):
        with pytest.raises(ValueError):
            local_affine_register(tissue, tissue[:, :-2])


class TestTps:
    def test_affine_points_give_zero_weights(self, rng):
        a = Affine2D([[1.1, 0.2, 3.0], [-0.1, 0.9, -4.0], [0, 0, 1]])
        src = rng.uniform(0, 100, (12, 2))
        tgt = src @ a.m[:2, :2].T + a.m[:2, 2]
        model = tps_fit(src, tgt)
        assert model.bending_norm() < 1e-8
        np.testing.assert_allclose(model.affine_part.m, a.m, atol=1e-8)

    def test_pure_translation(self, rng):
        src = rng.uniform(0, 50, (7, 2))
        model = tps_fit(src, src + [7, -3])
        assert model.bending_norm() < 1e-8
        np.testing.assert_allclose(model.affine_part.m[:2, 2], [7, -3], atol=1e-8)
        f = tps_to_field(model, 9, 6)
        np.testing.assert_allclose(f.u, 7, atol=1e-8)
        np.testing.assert_allclose(f.v, -3, atol=1e-8)

    @given(st.integers(0, 2**31 - 1))
    def test_exact_interpolation_and_side_conditions(self, seed):
        rng = np.random.default_rng(seed)
        src = rng.uniform(0, 60, (10, 2))
        tgt = src + rng.normal(0, 3, (10, 2))
        model = tps_fit(src, tgt)
        np.testing.assert_allclose(model(src), tgt, atol=1e-6)
        w = model.weights
        np.testing.assert_allclose(w.sum(0), 0, atol=1e-8)
        np.testing.assert_allclose(w.T @ src, 0, atol=1e-6)

    def test_field_matches_control_points(self, rng):
        src = rng.integers(2, 30, (10, 2)).astype(float)
        src = np.unique(src, axis=0)
        tgt = src + rng.normal(0, 2, src.shape)
        model = tps_fit(src, tgt)
        f = tps_to_field(model, 32, 32)
        for (x, y), q in zip(src.astype(int), tgt):
            assert f.u[y, x] == pytest.approx(q[0] - x, abs=1e-5)
            assert f.v[y, x] == pytest.approx(q[1] - y, abs=1e-5)

    def test_identity_model_zero_field(self):
        pts = np.array([[0.0, 0], [10, 0], [0, 10], [7, 7]])
        assert tps_to_field(tps_fit(pts, pts), 12, 12).max_magnitude() < 1e-9

    def test_grid_step_close_to_dense(self, rng):
        # smooth motion seen through noisy matches, as in the pipeline
        from histreg.imgcore import sample_field

        truth = smooth_field(256, 10.0, seed=4)
        src = rng.uniform(0, 255, (200, 2))
        tgt = src + sample_field(truth, src) + rng.normal(0, 0.5, src.shape)
        model = tps_fit(src, tgt, lam=10.0)
        dense = tps_to_field(model, 256, 256)
        coarse = tps_to_field(model, 256, 256, step=4)
        err = np.hypot(dense.u - coarse.u, dense.v - coarse.v)
        assert err.mean() < 0.03 and err.max() < 0.5
        assert np.array_equal(coarse.u[::4, ::4], dense.u[::4, ::4])

    def test_lambda_monotone_bending(self, rng):
        src = rng.uniform(0, 100, (20, 2))
        tgt = src + rng.normal(0, 4, (20, 2))
        norms = [tps_fit(src, tgt, lam).bending_norm() for lam in (0, 0.1, 1, 10, 100, 1000)]
        assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))

    @pytest.mark.parametrize("src", [
        [[0, 0], [1, 1]],
        [[0, 0], [1, 1], [2, 2], [3, 3]],
        [[0, 0], [5, 1], [0, 0], [3, 9]],
    ])
    def test_degenerate(self, src):
        with pytest.raises(DegenerateControlPointsError):
            tps_fit(src, src)

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            TpsModel(np.zeros((3, 2)), np.zeros((3, 2)), Affine2D.identity(), lam=-1)

    def test_from_matches_dedup_and_scale(self):
        def kp(x, y):
            return Keypoint(float(x), float(y), 1.0, 0.0, np.zeros(1, np.float32))

        pts = [(10, 10), (50, 12), (30, 40), (70, 70), (12, 60)]
        pairs = [(kp(x + 4, y - 2), kp(x, y), 1.0) for x, y in pts]
        # a near-duplicate target point with a worse distance is dropped
        pairs.append((kp(100, 100), kp(10.5, 10.5), 5.0))
        model = tps_from_matches([MatchSet("a", tuple(pairs)), MatchSet("b")], lam=0.0, scale=2.0)
        assert len(model.control_points) == 5
        np.testing.assert_allclose(model([[15, 15]]), [[17, 14]], atol=1e-6)

    def test_from_matches_needs_points(self):
        with pytest.raises(DegenerateControlPointsError):
            tps_from_matches([MatchSet("a")])


class TestAffineInit:
    def _pair(self):
        a = Affine2D.about((63.5, 63.5), scale=1.05, angle=0.1, shift=(3, -2))
        fixed = _analytic(SIZE, SIZE, a)
        moving = _analytic(SIZE, SIZE)
        return a, fixed, moving, affine_to_field(a, SIZE, SIZE)

    def test_constant_images_return_init_exactly(self):
        img = np.full((64, 64), 0.3)
        init = affine_to_field(Affine2D.about((31.5, 31.5), angle=0.2, shift=(2, 1)), 64, 64)
        for engine in (demons_register, mind_demons_register, local_affine_register):
            out = engine(img, img, init)
            assert np.array_equal(out.u, init.u) and np.array_equal(out.v, init.v)

    @pytest.mark.parametrize("engine", [demons_register, mind_demons_register, local_affine_register])
    def test_correct_affine_init_is_kept(self, engine):
        a, fixed, moving, init = self._pair()
        out = engine(fixed, moving, init)
        probe = np.array([[40.0, 50.0], [80.0, 70.0], [64.0, 90.0]])
        moved = warp_points(out, probe)
        expected = probe @ a.m[:2, :2].T + a.m[:2, 2]
        assert np.abs(moved - expected).max() < 0.1
