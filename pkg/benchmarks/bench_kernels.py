"""Time the numba and numpy flavour of every hot kernel on 512x512 inputs.

    python benchmarks/bench_kernels.py [--size 512] [--repeat 5]

The numba column excludes compilation: each kernel is called once before
timing.  Results are also checked for agreement.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from histreg import _accel, kernels


def _cases(size, rng):
    img = rng.random((size, size))
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    x = xx + rng.normal(0, 3, xx.shape)
    y = yy + rng.normal(0, 3, yy.shape)
    mask = (img > 0.5).astype(np.uint8)
    rot = np.array([[0.99, -0.1, 4.0], [0.1, 0.99, -3.0], [0, 0, 1.0]])
    chans = [rng.normal(size=(6, size, size)) for _ in range(6)]
    grads = [rng.normal(size=(size, size)) for _ in range(4)]
    spacing = size / 15
    nw = int(np.ceil((size - 1) / spacing)) + 1
    params = rng.normal(size=(nw, nw, 8))
    pts = [rng.uniform(0, size, 200) for _ in range(2)] + [rng.normal(size=200) for _ in range(2)]
    return {
        "bilinear_zero": (img, x, y),
        "bilinear_clamp": (img, x, y),
        "nearest_zero": (img, x, y),
        "affine_mask_overlap": (mask, mask, rot),
        "mind_distances": (img, kernels.MIND_OFFSETS, np.array([0.1, 0.2, 0.4, 0.2, 0.1])),
        "demons_force": (*chans, 1.0, 1e-8, 2.0),
        "window_normal_eqs": (*grads, rng.random((size, size)), spacing, nw, nw),
        "blend_windows": (params, size, size, spacing),
        "tps_kernel_sum": (*pts, xx, yy),
    }


def _best(fn, args, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times), out


def _max_diff(a, b):
    if isinstance(a, tuple):
        return max(_max_diff(p, q) for p, q in zip(a, b))
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(1.0, float(np.abs(b).max()) if b.size else 1.0)
    return float(np.abs(a - b).max()) / scale if a.size else 0.0


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if not _accel.HAVE_NUMBA:
        print("numba is not installed; only the numpy column is meaningful")
    cases = _cases(args.size, np.random.default_rng(0))
    print(f"{'kernel':<22}{'numba ms':>10}{'numpy ms':>10}{'speed-up':>10}{'rel diff':>11}")
    for name, (nb, npf) in kernels.PAIRS.items():
        call = cases[name]
        nb(*call)  # compile
        t_nb, out_nb = _best(nb, call, args.repeat)
        t_np, out_np = _best(npf, call, args.repeat)
        print(f"{name:<22}{1e3 * t_nb:>10.2f}{1e3 * t_np:>10.2f}{t_np / t_nb:>9.1f}x{_max_diff(out_nb, out_np):>11.1e}")


if __name__ == "__main__":
    main()
