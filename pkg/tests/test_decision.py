import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histreg.decision import METHODS, RegistrationResult, masked_mind_ssd, score_field, select_best
from histreg.imgcore import DisplacementField, warp_image
from histreg.nonrigid import mind_descriptor
from histreg.preprocess import li_threshold
from histreg.synthetic import random_texture, smooth_field, tissue_image

Z = DisplacementField.zeros(4, 4)


def _res(method, score):
    return RegistrationResult(method, Z, score)


@pytest.fixture(scope="module")
def fixed():
    return 1.0 - tissue_image(96, seed=9, radius=0.3)


@pytest.fixture(scope="module")
def mask(fixed):
    return li_threshold(fixed)[1]


class TestScore:
    def test_identical_is_zero(self, fixed, mask):
        assert masked_mind_ssd(fixed, fixed, mask) == 0.0

    @given(st.floats(0.25, 4), st.floats(-0.25, 0.25))
    def test_linear_invariance(self, a, b):
        img = random_texture(48, seed=2, sigma=1.5)
        m = img > 0.5
        assert masked_mind_ssd(img, a * img + b, m) < 1e-5
        assert masked_mind_ssd(a * img + b, img, m) < 1e-5

    def test_ordering(self, fixed, mask):
        shifted = warp_image(fixed, DisplacementField.constant(96, 96, 3.0, 0.0))
        unrelated = 1.0 - tissue_image(96, seed=123, radius=0.3)
        assert masked_mind_ssd(fixed, unrelated, mask) > masked_mind_ssd(fixed, shifted, mask)

    def test_empty_mask(self, fixed):
        with pytest.raises(ValueError):
            masked_mind_ssd(fixed, fixed, np.zeros_like(fixed, dtype=bool))

    def test_cached_descriptor_same(self, fixed, mask):
        other = np.roll(fixed, 2, axis=1)
        assert masked_mind_ssd(fixed, other, mask, mind_descriptor(fixed)) == masked_mind_ssd(fixed, other, mask)

    def test_mean_over_mask_oracle(self, fixed, mask):
        other = np.roll(fixed, 1, axis=0)
        d = ((mind_descriptor(fixed) - mind_descriptor(other)) ** 2).sum(0)
        assert masked_mind_ssd(fixed, other, mask) == pytest.approx(d[mask].mean(), rel=1e-12)

    def test_planted_ground_truth_wins(self, fixed, mask):
        from histreg.synthetic import _approx_inverse

        truth = smooth_field(96, 4.0, seed=5)
        moving = warp_image(fixed, _approx_inverse(truth))
        cands = [score_field("demons", DisplacementField.zeros(96, 96), fixed, moving, mask),
                 score_field("tps", truth, fixed, moving, mask),
                 score_field("initial_only", smooth_field(96, 4.0, seed=6), fixed, moving, mask)]
        assert select_best(cands)[0] == 1

    def test_dice_after(self, fixed, mask):
        r = score_field("demons", DisplacementField.zeros(96, 96), fixed, fixed, mask, mask)
        assert r.dice_after == 1.0
        assert math.isnan(score_field("demons", DisplacementField.zeros(96, 96), fixed, fixed, mask).dice_after)


class TestSelect:
    def test_single(self):
        assert select_best([_res("tps", 3.0)])[0] == 0

    def test_empty(self):
        with pytest.raises(ValueError):
            select_best([])

    def test_all_equal_prefers_local_affine(self):
        cands = [_res(m, 0.5) for m in reversed(METHODS)]
        idx, best = select_best(cands)
        assert best.method == "local_affine" and idx == len(METHODS) - 1

    def test_invalid_result(self):
        with pytest.raises(ValueError):
            _res("bspline", 0.1)
        with pytest.raises(ValueError):
            _res("tps", -1.0)
        with pytest.raises(ValueError):
            _res("tps", math.nan)

    @given(st.lists(st.tuples(st.sampled_from(METHODS), st.floats(0, 5)), min_size=1, max_size=8),
           st.tuples(st.sampled_from(METHODS), st.floats(0, 5)))
    def test_min_and_monotone(self, items, extra):
        cands = [_res(m, s) for m, s in items]
        _, best = select_best(cands)
        assert all(best.mind_ssd <= c.mind_ssd for c in cands)
        _, best2 = select_best(cands + [_res(*extra)])
        assert best2.mind_ssd <= best.mind_ssd

    @given(st.lists(st.tuples(st.sampled_from(METHODS), st.floats(0, 5)), min_size=1, max_size=8),
           st.randoms(use_true_random=False))
    def test_order_independent_choice(self, items, rnd):
        cands = [_res(m, s) for m, s in items]
        shuffled = cands[:]
        rnd.shuffle(shuffled)
        a, b = select_best(cands)[1], select_best(shuffled)[1]
        assert (a.mind_ssd, a.method) == (b.mind_ssd, b.method)
