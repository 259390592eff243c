"""Both kernel flavours must agree; they are the same algorithm written twice."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from histreg import _accel, kernels


def _pair(name):
    return kernels.PAIRS[name]


def test_every_kernel_is_registered():
    for name, (nb, npf) in kernels.PAIRS.items():
        assert getattr(kernels, name) in (nb, npf)


def test_backend_matches_flag():
    assert _accel.backend() == ("numba" if _accel.USE_NUMBA else "numpy")
    expected = kernels.PAIRS["bilinear_zero"][0 if _accel.USE_NUMBA else 1]
    assert kernels.bilinear_zero is expected


@given(st.integers(2, 12), st.integers(2, 12), st.integers(0, 2**31 - 1))
def test_sampling_kernels_agree(h, w, seed):
    rng = np.random.default_rng(seed)
    img = rng.random((h, w))
    x = rng.uniform(-2, w + 1, size=(7, 5))
    y = rng.uniform(-2, h + 1, size=(7, 5))
    # exercise the exact-border and near-border paths too
    x[0, :3] = [0.0, w - 1.0, w - 1 + 5e-7]
    y[0, :3] = [h - 1.0, 0.0, -5e-7]
    for name in ("bilinear_zero", "bilinear_clamp", "nearest_zero"):
        nb, npf = _pair(name)
        np.testing.assert_allclose(nb(img, x, y), npf(img, x, y), rtol=0, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_mask_overlap_agrees(seed):
    rng = np.random.default_rng(seed)
    src = (rng.random((20, 17)) > 0.5).astype(np.uint8)
    tgt = (rng.random((15, 19)) > 0.4).astype(np.uint8)
    ang = rng.uniform(0, 2 * np.pi)
    m = np.array([[np.cos(ang), -np.sin(ang), rng.uniform(-3, 8)],
                  [np.sin(ang), np.cos(ang), rng.uniform(-3, 8)], [0, 0, 1.0]])
    nb, npf = _pair("affine_mask_overlap")
    assert tuple(nb(src, tgt, m)) == tuple(npf(src, tgt, m))


@pytest.mark.parametrize("taps", [np.array([0.25, 0.5, 0.25]), np.array([0.1, 0.2, 0.4, 0.2, 0.1])])
def test_mind_distances_agree(rng, taps):
    img = rng.random((18, 23))
    nb, npf = _pair("mind_distances")
    np.testing.assert_allclose(nb(img, kernels.MIND_OFFSETS, taps), npf(img, kernels.MIND_OFFSETS, taps),
                               rtol=0, atol=1e-12)


def test_mind_distances_brute_force(rng):
    img = rng.random((9, 11))
    taps = np.array([0.25, 0.5, 0.25])
    got = kernels.mind_distances(img, kernels.MIND_OFFSETS, taps)
    h, w = img.shape
    for k, (dx, dy) in enumerate(kernels.MIND_OFFSETS):
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for a in (-1, 0, 1):
                    for b in (-1, 0, 1):
                        rr = min(max(r + a, 0), h - 1)
                        cc = min(max(c + b, 0), w - 1)
                        r2 = min(max(rr + dy, 0), h - 1)
                        c2 = min(max(cc + dx, 0), w - 1)
                        acc += taps[a + 1] * taps[b + 1] * (img[rr, cc] - img[r2, c2]) ** 2
                assert got[k, r, c] == pytest.approx(acc, abs=1e-12)


@pytest.mark.parametrize("channels", [1, 6])
def test_demons_force_agree(rng, channels):
    shape = (channels, 13, 16)
    arrs = [rng.normal(size=shape) for _ in range(6)]
    nb, npf = _pair("demons_force")
    a = nb(*arrs, 1.0, 1e-8, 2.0)
    b = npf(*arrs, 1.0, 1e-8, 2.0)
    for u, v in zip(a, b):
        np.testing.assert_allclose(u, v, rtol=0, atol=1e-12)
    assert np.hypot(*a).max() <= 2.0 + 1e-12


def test_demons_force_single_pixel_formula():
    f, m = np.array([[[0.7]]]), np.array([[[0.2]]])
    fx, fy, mx, my = (np.array([[[v]]]) for v in (0.3, -0.1, 0.1, 0.2))
    ux, uy = kernels.demons_force(f, m, fx, fy, mx, my, 1.0, 0.0, 100.0)
    gx, gy, d = 0.4, 0.1, 0.5
    den = gx * gx + gy * gy + d * d
    assert ux[0, 0] == pytest.approx(2 * d * gx / den, abs=1e-14)
    assert uy[0, 0] == pytest.approx(2 * d * gy / den, abs=1e-14)


@pytest.mark.parametrize("spacing,nwx,nwy", [(8.0, 4, 3), (5.5, 6, 4)])
def test_window_normal_eqs_agree(rng, spacing, nwx, nwy):
    h, w = 19, 23
    args = [rng.normal(size=(h, w)) for _ in range(4)]
    weight = rng.random((h, w))
    weight[weight < 0.2] = 0.0
    nb, npf = _pair("window_normal_eqs")
    for a, b in zip(nb(*args, weight, spacing, nwx, nwy), npf(*args, weight, spacing, nwx, nwy)):
        np.testing.assert_allclose(a, b, rtol=1e-11, atol=1e-10)


def test_window_normal_eqs_brute_force(rng):
    h, w, spacing = 9, 10, 4.0
    nwx, nwy = 4, 3
    gx, gy, mw, rhs = (rng.normal(size=(h, w)) for _ in range(4))
    weight = rng.random((h, w))
    ata, atb, mass = kernels.window_normal_eqs(gx, gy, mw, rhs, weight, spacing, nwx, nwy)
    ref_ata = np.zeros_like(ata)
    ref_atb = np.zeros_like(atb)
    ref_mass = np.zeros_like(mass)
    for r in range(h):
        for c in range(w):
            for j in range(nwy):
                for i in range(nwx):
                    hat = max(0.0, 1 - abs(c / spacing - i)) * max(0.0, 1 - abs(r / spacing - j))
                    if hat == 0:
                        continue
                    xr, yr = c / spacing - i, r / spacing - j
                    phi = np.array([gx[r, c] * xr, gx[r, c] * yr, gy[r, c] * xr, gy[r, c] * yr,
                                    gx[r, c], gy[r, c], mw[r, c], 1.0])
                    a = hat * weight[r, c]
                    ref_ata[j, i] += a * np.outer(phi, phi)
                    ref_atb[j, i] += a * phi * rhs[r, c]
                    ref_mass[j, i] += a
    np.testing.assert_allclose(ata, ref_ata, atol=1e-10)
    np.testing.assert_allclose(atb, ref_atb, atol=1e-10)
    np.testing.assert_allclose(mass, ref_mass, atol=1e-12)


def test_blend_windows_agree(rng):
    params = rng.normal(size=(3, 4, 8))
    nb, npf = _pair("blend_windows")
    np.testing.assert_allclose(nb(params, 11, 17, 5.0), npf(params, 11, 17, 5.0), rtol=0, atol=1e-12)


def test_blend_windows_reproduces_window_at_its_centre(rng):
    params = rng.normal(size=(3, 3, 8))
    out = kernels.blend_windows(params, 9, 9, 4.0)
    # window (1, 1) sits at pixel (4, 4), where its hat weight is 1
    q = params[1, 1]
    np.testing.assert_allclose(out[:, 4, 4], [q[4], q[5], q[6], q[7]], atol=1e-12)


def test_tps_kernel_sum_agree(rng):
    cx, cy, wx, wy = (rng.normal(size=9) for _ in range(4))
    px = rng.normal(size=(5, 6))
    py = rng.normal(size=(5, 6))
    px[0, 0], py[0, 0] = cx[0], cy[0]  # exactly on a control point
    nb, npf = _pair("tps_kernel_sum")
    for a, b in zip(nb(cx, cy, wx, wy, px, py), npf(cx, cy, wx, wy, px, py)):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)
