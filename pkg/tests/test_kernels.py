"""Twin-kernel equivalence: the numba builds and the pure-numpy fallbacks
must agree, and the accel flag must switch the dispatch."""

import numpy as np
import pytest

from retinareg import accel, kernels

needs_numba = pytest.mark.skipif(not accel.HAVE_NUMBA, reason="numba not installed")


@needs_numba
class TestTwinEquivalence:
    def test_bicubic_bit_exact(self, rng):
        for _ in range(5):
            gh, gw = rng.integers(2, 40, 2)
            f = int(rng.integers(1, 5))
            oh = int(rng.integers(max(1, (gh - 1) * f + 1), gh * f + 1))
            ow = int(rng.integers(max(1, (gw - 1) * f + 1), gw * f + 1))
            g = rng.standard_normal((gh, gw))
            a = kernels.bicubic_upsample_numba(g, f, oh, ow)
            b = kernels.bicubic_upsample_numpy(g, f, oh, ow)
            assert np.array_equal(a, b)

    def test_nms_identical(self, rng):
        for _ in range(5):
            h, w = 48, 56
            vals = rng.standard_normal(h * w)
            order = np.argsort(-vals, kind="stable")
            ys, xs = np.divmod(order.astype(np.int64), w)
            a = kernels.greedy_nms_numba(ys, xs, h, w, 4.0)
            b = kernels.greedy_nms_numpy(ys, xs, h, w, 4.0)
            assert np.array_equal(a, b)

    def test_nms_identical_with_cap(self, rng):
        h, w = 32, 32
        vals = rng.standard_normal(h * w)
        order = np.argsort(-vals, kind="stable")
        ys, xs = np.divmod(order.astype(np.int64), w)
        a = kernels.greedy_nms_numba(ys, xs, h, w, 3.0, max_keep=10)
        b = kernels.greedy_nms_numpy(ys, xs, h, w, 3.0, max_keep=10)
        assert np.array_equal(a, b) and len(a) == 10

    def test_bilinear_bit_exact(self, rng):
        grid = rng.standard_normal((13, 17, 6))
        gx = rng.uniform(-2, 19, 200)
        gy = rng.uniform(-2, 15, 200)
        a = kernels.bilinear_grid_sample_numba(np.ascontiguousarray(grid), gx, gy)
        b = kernels.bilinear_grid_sample_numpy(grid, gx, gy)
        assert np.array_equal(a, b)

    def test_projection_bit_exact(self, rng):
        h = np.array([[1.1, 0.02, 5.0], [-0.03, 0.95, -7.0], [1e-5, -2e-5, 1.0]]).ravel()
        src = rng.uniform(0, 512, (300, 2))
        dst = rng.uniform(0, 512, (300, 2))
        a = kernels.projection_errors_numba(h, src, dst)
        b = kernels.projection_errors_numpy(h, src, dst)
        assert np.array_equal(a, b)

    def test_histograms_close(self, rng):
        b0 = rng.integers(0, 8, (72, 72)).astype(np.int64)
        b1 = (b0 + 1) % 8
        m0 = rng.uniform(0, 1, (72, 72))
        m1 = rng.uniform(0, 1, (72, 72))
        a = kernels.orientation_histograms_numba(b0, b1, m0, m1, 11, 11, 4, 32, 4, 8)
        b = kernels.orientation_histograms_numpy(b0, b1, m0, m1, 11, 11, 4, 32, 4, 8)
        assert a.shape == (11, 11, 128)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_numba
def test_dispatch_follows_flag(rng):
    g = rng.standard_normal((8, 8))
    was = accel.enabled()
    try:
        accel.set_enabled(False)
        out_py = kernels.bicubic_upsample(g, 4, 32, 32)
        accel.set_enabled(True)
        out_jit = kernels.bicubic_upsample(g, 4, 32, 32)
    finally:
        accel.set_enabled(was)
    assert np.array_equal(out_py, out_jit)


def test_projection_degenerate_gives_inf():
    h = np.array([[1.0, 0, 0], [0, 1.0, 0], [1.0, 0, -5.0]]).ravel()
    src = np.array([[5.0, 1.0], [6.0, 1.0]])
    dst = np.zeros((2, 2))
    out = kernels.projection_errors(h, src, dst)
    assert np.isinf(out[0]) and np.isfinite(out[1])


def test_upsample_errors():
    g = np.zeros((4, 4))
    with pytest.raises(Exception):
        kernels.bicubic_upsample(g, 0, 4, 4)
    with pytest.raises(Exception):
        kernels.bicubic_upsample(g, 2, 9, 8)
