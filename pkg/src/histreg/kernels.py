"""Per-pixel inner loops, in a numba flavour and a numpy flavour.

Every kernel ``foo`` is defined as ``foo_nb`` (explicit loops, compiled with
``@njit`` when numba is present) and ``foo_np`` (vectorised numpy).  The bare
name ``foo`` is bound to one of them according to :mod:`histreg._accel`.
Both flavours compute the same thing in the same floating point order where
practical; ``tests/test_kernels.py`` holds them to 1e-12.

Array conventions: images are float64 ``(H, W)``; sample coordinates are
float64 arrays of any (matching) shape in pixel units, ``x`` = column.
"""

from __future__ import annotations

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# tolerance for treating a coordinate that is a rounding error outside the
# raster as inside
EDGE_TOL = 1e-6

# MIND neighbourhood as (dx, dy)
MIND_OFFSETS = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [1, 1], [-1, -1]], dtype=np.int64)


# --------------------------------------------------------------------------
# bilinear / nearest sampling
# --------------------------------------------------------------------------
@njit
def bilinear_zero_nb(img, x, y):
    h, w = img.shape
    xf = x.ravel()
    yf = y.ravel()
    out = np.zeros(xf.size)
    for k in range(xf.size):
        xx = xf[k]
        yy = yf[k]
        if not (xx >= -EDGE_TOL and xx <= w - 1 + EDGE_TOL and yy >= -EDGE_TOL and yy <= h - 1 + EDGE_TOL):
            continue
        xx = min(max(xx, 0.0), w - 1.0)
        yy = min(max(yy, 0.0), h - 1.0)
        x0 = min(int(math.floor(xx)), max(w - 2, 0))
        y0 = min(int(math.floor(yy)), max(h - 2, 0))
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = xx - x0
        fy = yy - y0
        out[k] = ((1.0 - fx) * (1.0 - fy) * img[y0, x0] + fx * (1.0 - fy) * img[y0, x1]
                  + (1.0 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])
    return out.reshape(x.shape)


@njit
def bilinear_clamp_nb(img, x, y):
    h, w = img.shape
    xf = x.ravel()
    yf = y.ravel()
    out = np.empty(xf.size)
    for k in range(xf.size):
        xx = min(max(xf[k], 0.0), w - 1.0)
        yy = min(max(yf[k], 0.0), h - 1.0)
        x0 = min(int(math.floor(xx)), max(w - 2, 0))
        y0 = min(int(math.floor(yy)), max(h - 2, 0))
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = xx - x0
        fy = yy - y0
        out[k] = ((1.0 - fx) * (1.0 - fy) * img[y0, x0] + fx * (1.0 - fy) * img[y0, x1]
                  + (1.0 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])
    return out.reshape(x.shape)


@njit
def nearest_zero_nb(img, x, y):
    h, w = img.shape
    xf = x.ravel()
    yf = y.ravel()
    out = np.zeros(xf.size)
    for k in range(xf.size):
        xi = int(math.floor(xf[k] + 0.5))
        yi = int(math.floor(yf[k] + 0.5))
        if 0 <= xi < w and 0 <= yi < h:
            out[k] = img[yi, xi]
    return out.reshape(x.shape)


def _bilinear_weights_np(shape, x, y):
    h, w = shape
    x0 = np.minimum(np.floor(x).astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    return x0, y0, x1, y1, x - x0, y - y0


def bilinear_clamp_np(img, x, y):
    h, w = img.shape
    xx = np.clip(x, 0.0, w - 1.0)
    yy = np.clip(y, 0.0, h - 1.0)
    x0, y0, x1, y1, fx, fy = _bilinear_weights_np(img.shape, xx, yy)
    return ((1.0 - fx) * (1.0 - fy) * img[y0, x0] + fx * (1.0 - fy) * img[y0, x1]
            + (1.0 - fx) * fy * img[y1, x0] + fx * fy * img[y1, x1])


def bilinear_zero_np(img, x, y):
    h, w = img.shape
    inside = (x >= -EDGE_TOL) & (x <= w - 1 + EDGE_TOL) & (y >= -EDGE_TOL) & (y <= h - 1 + EDGE_TOL)
    out = bilinear_clamp_np(img, x, y)
    return np.where(inside, out, 0.0)


def nearest_zero_np(img, x, y):
    h, w = img.shape
    xi = np.floor(x + 0.5).astype(np.int64)
    yi = np.floor(y + 0.5).astype(np.int64)
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out = img[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
    return np.where(inside, out, 0.0)


# --------------------------------------------------------------------------
# mask overlap under an affine map (rotation search, Dice scoring)
# --------------------------------------------------------------------------
@njit
def affine_mask_overlap_nb(src, tgt, m):
    """Return (|warped src & tgt|, |warped src|) with nearest sampling."""
    h, w = tgt.shape
    hs, ws = src.shape
    inter = 0
    count = 0
    for r in range(h):
        for c in range(w):
            sx = m[0, 0] * c + m[0, 1] * r + m[0, 2]
            sy = m[1, 0] * c + m[1, 1] * r + m[1, 2]
            xi = int(math.floor(sx + 0.5))
            yi = int(math.floor(sy + 0.5))
            if 0 <= xi < ws and 0 <= yi < hs and src[yi, xi]:
                count += 1
                if tgt[r, c]:
                    inter += 1
    return inter, count


def affine_mask_overlap_np(src, tgt, m):
    h, w = tgt.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = m[0, 0] * xx + m[0, 1] * yy + m[0, 2]
    sy = m[1, 0] * xx + m[1, 1] * yy + m[1, 2]
    warped = nearest_zero_np(src.astype(np.float64), sx, sy) > 0.5
    return int(np.count_nonzero(warped & (tgt > 0))), int(np.count_nonzero(warped))


# --------------------------------------------------------------------------
# MIND patch distances
# --------------------------------------------------------------------------
@njit
def mind_distances_nb(img, offsets, g1):
    h, w = img.shape
    n = offsets.shape[0]
    rad = (g1.size - 1) // 2
    out = np.zeros((n, h, w))
    diff = np.empty((h, w))
    tmp = np.empty((h, w))
    for k in range(n):
        dx = offsets[k, 0]
        dy = offsets[k, 1]
        # squared difference against the clamped shift
        for r in range(h):
            rr = min(max(r + dy, 0), h - 1)
            for c in range(w):
                cc = min(max(c + dx, 0), w - 1)
                d = img[r, c] - img[rr, cc]
                diff[r, c] = d * d
        # separable patch filter, nearest-edge padding
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for t in range(-rad, rad + 1):
                    acc += g1[t + rad] * diff[r, min(max(c + t, 0), w - 1)]
                tmp[r, c] = acc
        for r in range(h):
            for c in range(w):
                acc = 0.0
                for t in range(-rad, rad + 1):
                    acc += g1[t + rad] * tmp[min(max(r + t, 0), h - 1), c]
                out[k, r, c] = acc
    return out


def mind_distances_np(img, offsets, g1):
    h, w = img.shape
    rad = (g1.size - 1) // 2
    rows = np.arange(h)
    cols = np.arange(w)
    out = np.empty((offsets.shape[0], h, w))
    for k, (dx, dy) in enumerate(offsets):
        shifted = img[np.clip(rows + dy, 0, h - 1)][:, np.clip(cols + dx, 0, w - 1)]
        diff = (img - shifted) ** 2
        tmp = np.zeros((h, w))
        for t in range(-rad, rad + 1):
            tmp = tmp + g1[t + rad] * diff[:, np.clip(cols + t, 0, w - 1)]
        acc = np.zeros((h, w))
        for t in range(-rad, rad + 1):
            acc = acc + g1[t + rad] * tmp[np.clip(rows + t, 0, h - 1)]
        out[k] = acc
    return out


# --------------------------------------------------------------------------
# symmetric Demons force (single- or multi-channel)
# --------------------------------------------------------------------------
@njit
def demons_force_nb(f, m, fx, fy, mx, my, alpha, floor, cap):
    nc, h, w = f.shape
    ux = np.zeros((h, w))
    uy = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            nx = 0.0
            ny = 0.0
            gg = 0.0
            dd = 0.0
            for k in range(nc):
                d = f[k, r, c] - m[k, r, c]
                gx = fx[k, r, c] + mx[k, r, c]
                gy = fy[k, r, c] + my[k, r, c]
                nx += d * gx
                ny += d * gy
                gg += gx * gx + gy * gy
                dd += d * d
            den = gg + alpha * dd + floor
            if den <= 0.0:
                continue
            vx = 2.0 * nx / den
            vy = 2.0 * ny / den
            mag = math.sqrt(vx * vx + vy * vy)
            if mag > cap:
                vx *= cap / mag
                vy *= cap / mag
            ux[r, c] = vx
            uy[r, c] = vy
    return ux, uy


def demons_force_np(f, m, fx, fy, mx, my, alpha, floor, cap):
    d = f - m
    gx = fx + mx
    gy = fy + my
    nx = (d * gx).sum(axis=0)
    ny = (d * gy).sum(axis=0)
    den = (gx * gx + gy * gy).sum(axis=0) + alpha * (d * d).sum(axis=0) + floor
    with np.errstate(divide="ignore", invalid="ignore"):
        vx = np.where(den > 0, 2.0 * nx / den, 0.0)
        vy = np.where(den > 0, 2.0 * ny / den, 0.0)
        mag = np.sqrt(vx * vx + vy * vy)
        shrink = np.where(mag > cap, cap / np.where(mag > 0, mag, 1.0), 1.0)
    return vx * shrink, vy * shrink


# --------------------------------------------------------------------------
# local affine: hat-weighted normal equations on a window grid
# --------------------------------------------------------------------------
@njit
def window_normal_eqs_nb(gx, gy, mw, rhs, weight, spacing, nwx, nwy):
    """Accumulate per-window 8x8 systems.

    Window (j, i) is centred at (i*spacing, j*spacing) with a bilinear hat of
    half-width ``spacing``.  Unknowns: 4 affine matrix entries and 2
    translations (coordinates relative to the centre, in units of
    ``spacing``), then contrast-minus-one and brightness.
    """
    h, w = gx.shape
    ata = np.zeros((nwy, nwx, 8, 8))
    atb = np.zeros((nwy, nwx, 8))
    mass = np.zeros((nwy, nwx))
    phi = np.empty(8)
    for r in range(h):
        fj = r / spacing
        j0 = min(int(math.floor(fj)), nwy - 2)
        ty = fj - j0
        for c in range(w):
            wp = weight[r, c]
            if wp <= 0.0:
                continue
            fi = c / spacing
            i0 = min(int(math.floor(fi)), nwx - 2)
            tx = fi - i0
            for dj in range(2):
                hy = ty if dj == 1 else 1.0 - ty
                if hy <= 0.0:
                    continue
                yr = fj - (j0 + dj)
                for di in range(2):
                    hx = tx if di == 1 else 1.0 - tx
                    if hx <= 0.0:
                        continue
                    xr = fi - (i0 + di)
                    a = hx * hy * wp
                    phi[0] = gx[r, c] * xr
                    phi[1] = gx[r, c] * yr
                    phi[2] = gy[r, c] * xr
                    phi[3] = gy[r, c] * yr
                    phi[4] = gx[r, c]
                    phi[5] = gy[r, c]
                    phi[6] = mw[r, c]
                    phi[7] = 1.0
                    jj = j0 + dj
                    ii = i0 + di
                    mass[jj, ii] += a
                    for p in range(8):
                        ap = a * phi[p]
                        atb[jj, ii, p] += ap * rhs[r, c]
                        for q in range(p, 8):
                            ata[jj, ii, p, q] += ap * phi[q]
    for jj in range(nwy):
        for ii in range(nwx):
            for p in range(8):
                for q in range(p + 1, 8):
                    ata[jj, ii, q, p] = ata[jj, ii, p, q]
    return ata, atb, mass


def window_normal_eqs_np(gx, gy, mw, rhs, weight, spacing, nwx, nwy):
    h, w = gx.shape
    fj = np.arange(h) / spacing
    fi = np.arange(w) / spacing
    j0 = np.minimum(np.floor(fj).astype(np.int64), nwy - 2)
    i0 = np.minimum(np.floor(fi).astype(np.int64), nwx - 2)
    ty = fj - j0
    tx = fi - i0
    ata = np.zeros((nwy * nwx, 8, 8))
    atb = np.zeros((nwy * nwx, 8))
    mass = np.zeros(nwy * nwx)
    iu = np.triu_indices(8)
    for dj in (0, 1):
        hy = ty if dj == 1 else 1.0 - ty
        yr = fj - (j0 + dj)
        for di in (0, 1):
            hx = tx if di == 1 else 1.0 - tx
            xr = fi - (i0 + di)
            a = hy[:, None] * hx[None, :] * weight
            keep = (a > 0) & (weight > 0)
            if not keep.any():
                continue
            rr, cc = np.nonzero(keep)
            av = a[rr, cc]
            gxv = gx[rr, cc]
            gyv = gy[rr, cc]
            phi = np.stack([gxv * xr[cc], gxv * yr[rr], gyv * xr[cc], gyv * yr[rr],
                            gxv, gyv, mw[rr, cc], np.ones_like(av)], axis=1)
            idx = (j0[rr] + dj) * nwx + (i0[cc] + di)
            ap = phi * av[:, None]
            nwin = nwy * nwx
            mass += np.bincount(idx, weights=av, minlength=nwin)
            rv = rhs[rr, cc]
            for p in range(8):
                atb[:, p] += np.bincount(idx, weights=ap[:, p] * rv, minlength=nwin)
            for p, q in zip(*iu):
                ata[:, p, q] += np.bincount(idx, weights=ap[:, p] * phi[:, q], minlength=nwin)
    low = np.tril_indices(8, -1)
    ata[:, low[0], low[1]] = ata[:, low[1], low[0]]
    return ata.reshape(nwy, nwx, 8, 8), atb.reshape(nwy, nwx, 8), mass.reshape(nwy, nwx)


@njit
def blend_windows_nb(params, h, w, spacing):
    """Dense (dx, dy, gamma, beta) from per-window parameters, with the same
    hat weights and relative coordinates as :func:`window_normal_eqs_nb`."""
    nwy, nwx = params.shape[0], params.shape[1]
    out = np.zeros((4, h, w))
    for r in range(h):
        fj = r / spacing
        j0 = min(int(math.floor(fj)), nwy - 2)
        ty = fj - j0
        for c in range(w):
            fi = c / spacing
            i0 = min(int(math.floor(fi)), nwx - 2)
            tx = fi - i0
            for dj in range(2):
                hy = ty if dj == 1 else 1.0 - ty
                yr = fj - (j0 + dj)
                for di in range(2):
                    hx = tx if di == 1 else 1.0 - tx
                    a = hx * hy
                    if a == 0.0:
                        continue
                    xr = fi - (i0 + di)
                    q = params[j0 + dj, i0 + di]
                    out[0, r, c] += a * (q[0] * xr + q[1] * yr + q[4])
                    out[1, r, c] += a * (q[2] * xr + q[3] * yr + q[5])
                    out[2, r, c] += a * q[6]
                    out[3, r, c] += a * q[7]
    return out


def blend_windows_np(params, h, w, spacing):
    nwy, nwx = params.shape[:2]
    fj = np.arange(h) / spacing
    fi = np.arange(w) / spacing
    j0 = np.minimum(np.floor(fj).astype(np.int64), nwy - 2)
    i0 = np.minimum(np.floor(fi).astype(np.int64), nwx - 2)
    ty = fj - j0
    tx = fi - i0
    out = np.zeros((4, h, w))
    for dj in (0, 1):
        hy = ty if dj else 1.0 - ty
        yr = (fj - (j0 + dj))[:, None]
        for di in (0, 1):
            hx = tx if di else 1.0 - tx
            xr = (fi - (i0 + di))[None, :]
            q = params[(j0 + dj)[:, None], (i0 + di)[None, :]]
            a = hy[:, None] * hx[None, :]
            out[0] += a * (q[..., 0] * xr + q[..., 1] * yr + q[..., 4])
            out[1] += a * (q[..., 2] * xr + q[..., 3] * yr + q[..., 5])
            out[2] += a * q[..., 6]
            out[3] += a * q[..., 7]
    return out


# --------------------------------------------------------------------------
# thin plate spline evaluation
# --------------------------------------------------------------------------
@njit
def tps_kernel_sum_nb(cx, cy, wx, wy, px, py):
    xf = px.ravel()
    yf = py.ravel()
    ox = np.zeros(xf.size)
    oy = np.zeros(xf.size)
    n = cx.size
    for k in range(xf.size):
        sx = 0.0
        sy = 0.0
        for i in range(n):
            dx = xf[k] - cx[i]
            dy = yf[k] - cy[i]
            r2 = dx * dx + dy * dy
            if r2 > 0.0:
                u = 0.5 * r2 * math.log(r2)
                sx += wx[i] * u
                sy += wy[i] * u
        ox[k] = sx
        oy[k] = sy
    return ox.reshape(px.shape), oy.reshape(px.shape)


def tps_kernel_sum_np(cx, cy, wx, wy, px, py, chunk=4096):
    xf = px.ravel()
    yf = py.ravel()
    ox = np.empty(xf.size)
    oy = np.empty(xf.size)
    for s in range(0, xf.size, chunk):
        dx = xf[s:s + chunk, None] - cx[None, :]
        dy = yf[s:s + chunk, None] - cy[None, :]
        r2 = dx * dx + dy * dy
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.where(r2 > 0, 0.5 * r2 * np.log(np.where(r2 > 0, r2, 1.0)), 0.0)
        ox[s:s + chunk] = u @ wx
        oy[s:s + chunk] = u @ wy
    return ox.reshape(px.shape), oy.reshape(px.shape)


if USE_NUMBA:
    bilinear_zero = bilinear_zero_nb
    bilinear_clamp = bilinear_clamp_nb
    nearest_zero = nearest_zero_nb
    affine_mask_overlap = affine_mask_overlap_nb
    mind_distances = mind_distances_nb
    demons_force = demons_force_nb
    window_normal_eqs = window_normal_eqs_nb
    blend_windows = blend_windows_nb
    tps_kernel_sum = tps_kernel_sum_nb
else:
    bilinear_zero = bilinear_zero_np
    bilinear_clamp = bilinear_clamp_np
    nearest_zero = nearest_zero_np
    affine_mask_overlap = affine_mask_overlap_np
    mind_distances = mind_distances_np
    demons_force = demons_force_np
    window_normal_eqs = window_normal_eqs_np
    blend_windows = blend_windows_np
    tps_kernel_sum = tps_kernel_sum_np

PAIRS = {
    "bilinear_zero": (bilinear_zero_nb, bilinear_zero_np),
    "bilinear_clamp": (bilinear_clamp_nb, bilinear_clamp_np),
    "nearest_zero": (nearest_zero_nb, nearest_zero_np),
    "affine_mask_overlap": (affine_mask_overlap_nb, affine_mask_overlap_np),
    "mind_distances": (mind_distances_nb, mind_distances_np),
    "demons_force": (demons_force_nb, demons_force_np),
    "window_normal_eqs": (window_normal_eqs_nb, window_normal_eqs_np),
    "blend_windows": (blend_windows_nb, blend_windows_np),
    "tps_kernel_sum": (tps_kernel_sum_nb, tps_kernel_sum_np),
}
