"""Benchmark the numba kernel builds against the pure-numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--size 512] [--repeat 5]

The same dispatchable kernels back the pipeline; RETINAREG_NUMBA=0 forces
the numpy path at run time.
"""

import argparse
import time

import numpy as np

from retinareg import accel, kernels


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def build_cases(size, rng):
    grid = rng.standard_normal((size // 4, size // 4))
    heat = rng.standard_normal(size * size)
    order = np.argsort(-heat, kind="stable")
    ys, xs = np.divmod(order.astype(np.int64), size)

    desc_grid = rng.standard_normal((size // 4, size // 4, 128))
    qx = rng.uniform(0, size // 4 - 1, 4000)
    qy = rng.uniform(0, size // 4 - 1, 4000)

    gh = gw = size // 4
    ph = (gh - 1) * 4 + 32
    b0 = rng.integers(0, 8, (ph, ph)).astype(np.int64)
    b1 = (b0 + 1) % 8
    m0 = rng.uniform(0, 1, (ph, ph))
    m1 = rng.uniform(0, 1, (ph, ph))

    h = np.array([[1.02, 0.01, 3.0], [-0.02, 0.99, -4.0], [1e-5, -1e-5, 1.0]]).ravel()
    src = rng.uniform(0, size, (4000, 2))
    dst = rng.uniform(0, size, (4000, 2))

    return [
        ("bicubic_upsample x4",
         lambda: kernels.bicubic_upsample_numpy(grid, 4, size, size),
         lambda: kernels.bicubic_upsample_numba(grid, 4, size, size)),
        (f"greedy_nms {size}x{size}",
         lambda: kernels.greedy_nms_numpy(ys, xs, size, size, 4.0, 4000),
         lambda: kernels.greedy_nms_numba(ys, xs, size, size, 4.0, 4000)),
        ("bilinear_sample 4000x128",
         lambda: kernels.bilinear_grid_sample_numpy(desc_grid, qx, qy),
         lambda: kernels.bilinear_grid_sample_numba(desc_grid, qx, qy)),
        (f"orientation_hist {gh}x{gw} cells",
         lambda: kernels.orientation_histograms_numpy(b0, b1, m0, m1, gh, gw, 4, 32, 4, 8),
         lambda: kernels.orientation_histograms_numba(b0, b1, m0, m1, gh, gw, 4, 32, 4, 8)),
        ("projection_errors 4000 pts",
         lambda: kernels.projection_errors_numpy(h, src, dst),
         lambda: kernels.projection_errors_numba(h, src, dst)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--size", type=int, default=512)
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()

    if not accel.HAVE_NUMBA:
        print("numba is not installed; nothing to compare")
        return

    kernels.warmup()
    rng = np.random.default_rng(0)
    cases = build_cases(args.size, rng)

    print(f"{'kernel':<30}{'numpy':>10}{'numba':>10}{'speedup':>9}")
    print("-" * 59)
    for name, numpy_fn, numba_fn in cases:
        numba_fn()  # compile this signature before timing
        t_np = best_of(numpy_fn, args.repeat)
        t_nb = best_of(numba_fn, args.repeat)
        print(f"{name:<30}{1e3 * t_np:>8.2f}ms{1e3 * t_nb:>8.2f}ms{t_np / t_nb:>8.1f}x")


if __name__ == "__main__":
    main()
