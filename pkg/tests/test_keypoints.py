import numpy as np
import pytest

from retinareg.errors import BadFactorError, DimensionMismatchError, OutOfBoundsError
from retinareg.features import DenseFeatureMap
from retinareg.keypoints import (
    confidence_heatmap,
    extract_keypoints,
    nms,
    sample_descriptors,
    upsample_bicubic,
)


def nms_oracle(heatmap, radius):
    """Brute-force greedy reference: direct distance checks, no grids."""
    h, w = heatmap.shape
    flat = heatmap.ravel()
    order = np.argsort(-flat, kind="stable")
    accepted = []
    for idx in order:
        y, x = divmod(int(idx), w)
        ok = True
        for ay, ax in accepted:
            if (ax - x) ** 2 + (ay - y) ** 2 <= radius * radius:
                ok = False
                break
        if ok:
            accepted.append((y, x))
    xy = np.array([(x, y) for y, x in accepted], float).reshape(len(accepted), 2)
    conf = np.array([heatmap[y, x] for y, x in accepted])
    return xy, conf


class TestBicubic:
    def test_constant_preserved_exactly(self):
        g = np.full((7, 5), 0.3713)
        out = upsample_bicubic(g, 4, 20, 28)
        assert np.all(out == 0.3713)

    def test_one_cell_grid_replicates(self):
        out = upsample_bicubic(np.array([[3.0]]), 4, 4, 4)
        assert out.shape == (4, 4) and np.all(out == 3.0)

    def test_linear_ramp_reproduced_interior(self):
        gh, gw, f = 12, 10, 4
        grid = np.add.outer(np.arange(gh, dtype=float), 2.0 * np.arange(gw))
        out = upsample_bicubic(grid, f, gw * f, gh * f)
        ys = np.arange(gh * f)
        xs = np.arange(gw * f)
        gy = (ys + 0.5) / f - 0.5
        gx = (xs + 0.5) / f - 0.5
        expected = np.add.outer(gy, 2.0 * gx)
        # interior: all four taps unclamped on both axes
        row_ok = (np.floor(gy) >= 1) & (np.floor(gy) <= gh - 3)
        col_ok = (np.floor(gx) >= 1) & (np.floor(gx) <= gw - 3)
        diff = np.abs(out - expected)[np.ix_(row_ok, col_ok)]
        assert diff.max() < 1e-6

    def test_bad_factor(self):
        with pytest.raises(BadFactorError):
            upsample_bicubic(np.zeros((4, 4)), 0, 4, 4)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            upsample_bicubic(np.zeros((4, 4)), 2, 8, 9)


def make_map(diff, stride=4, dim=4):
    """Feature map whose vessel-background logit difference equals diff."""
    gh, gw = diff.shape
    logits = np.stack([diff / 2.0, -diff / 2.0], axis=2).astype(np.float32)
    desc = np.zeros((gh, gw, dim), np.float32)
    return DenseFeatureMap(source_w=gw * stride, source_h=gh * stride, stride=stride,
                           detector_logits=logits, descriptors=desc)


class TestConfidenceHeatmap:
    def test_equal_channels_zero(self):
        gh, gw = 6, 8
        logits = np.repeat(np.random.default_rng(0).standard_normal((gh, gw, 1)), 2, axis=2)
        fm = DenseFeatureMap(source_w=gw * 4, source_h=gh * 4, stride=4,
                             detector_logits=logits.astype(np.float32),
                             descriptors=np.zeros((gh, gw, 4), np.float32))
        assert np.all(confidence_heatmap(fm) == 0.0)

    def test_impulse_peak_location_and_bound(self):
        diff = np.zeros((9, 9))
        diff[4, 4] = 2.0
        hm = confidence_heatmap(make_map(diff))
        assert hm.shape == (36, 36)
        py, px = np.unravel_index(np.argmax(hm), hm.shape)
        # cell (4, 4) center sits at pixel (17.5, 17.5)
        assert abs(px - 17.5) <= 2.0 and abs(py - 17.5) <= 2.0
        assert hm.max() <= 2.0 * 1.265625

    def test_difference_commutes_with_upsampling(self, rng):
        gh, gw = 7, 9
        v = rng.standard_normal((gh, gw)).astype(np.float32)
        b = rng.standard_normal((gh, gw)).astype(np.float32)
        fm = DenseFeatureMap(source_w=gw * 4, source_h=gh * 4, stride=4,
                             detector_logits=np.stack([v, b], axis=2),
                             descriptors=np.zeros((gh, gw, 4), np.float32))
        hm = confidence_heatmap(fm)
        separate = (upsample_bicubic(v.astype(np.float64), 4, gw * 4, gh * 4)
                    - upsample_bicubic(b.astype(np.float64), 4, gw * 4, gh * 4))
        assert np.abs(hm - separate).max() < 1e-6


class TestNms:
    def test_single_global_max_first(self):
        hm = np.full((20, 20), -1000.0)
        hm[7, 9] = 5.0
        kps = nms(hm, radius=4)
        assert tuple(kps.xy[0]) == (9.0, 7.0) and kps.conf[0] == 5.0

    def test_radius_semantics(self):
        hm = np.zeros((30, 30))
        hm[10, 10] = 2.0
        hm[10, 13] = 1.0   # 3 px away: suppressed at radius 4
        kps = extract_keypoints(hm, n_max=10, radius=4)
        assert len(kps) == 1
        hm[10, 13] = 0.0
        hm[10, 15] = 1.0   # 5 px away: survives
        kps = extract_keypoints(hm, n_max=10, radius=4)
        assert len(kps) == 2

    def test_exact_radius_suppressed(self):
        hm = np.zeros((20, 20))
        hm[5, 5] = 2.0
        hm[5, 9] = 1.0     # exactly 4 px: distance <= radius suppresses
        assert len(extract_keypoints(hm, n_max=10, radius=4)) == 1

    def test_oracle_equivalence_random(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            h, w = int(rng.integers(8, 64)), int(rng.integers(8, 64))
            hm = rng.standard_normal((h, w))
            kps = nms(hm, radius=4)
            oracle_xy, oracle_conf = nms_oracle(hm, 4)
            assert np.array_equal(kps.xy, oracle_xy)
            assert np.array_equal(kps.conf, oracle_conf)

    def test_oracle_equivalence_with_ties(self):
        hm = np.zeros((16, 16))
        hm[3, 3] = 1.0
        hm[3, 5] = 1.0   # tie: row-major lower index wins, suppresses the other
        hm[12, 12] = 1.0
        kps = nms(hm, radius=4)
        oracle_xy, _ = nms_oracle(hm, 4)
        assert np.array_equal(kps.xy, oracle_xy)
        assert [3.0, 3.0] in kps.xy.tolist() and [5.0, 3.0] not in kps.xy.tolist()


class TestExtractKeypoints:
    def test_top_n_of_isolated_peaks(self):
        hm = np.zeros((64, 64))
        peaks = [(5, 5, 10.0), (5, 20, 9.0), (20, 5, 8.0), (20, 20, 7.0), (40, 40, 6.0),
                 (5, 40, 5.0), (40, 5, 4.0), (55, 55, 3.0), (40, 20, 2.0), (20, 40, 1.0)]
        for y, x, v in peaks:
            hm[y, x] = v
        kps = extract_keypoints(hm, n_max=4)
        assert len(kps) == 4
        assert kps.conf.tolist() == [10.0, 9.0, 8.0, 7.0]

    def test_all_below_min_confidence(self):
        hm = np.full((32, 32), -0.5)
        assert len(extract_keypoints(hm, n_max=10, min_confidence=0.0)) == 0

    def test_cap_separation_and_order(self, rng):
        hm = rng.uniform(-1, 1, (96, 96))
        kps = extract_keypoints(hm, n_max=50, min_confidence=0.0, radius=4)
        assert len(kps) <= 50
        assert np.all(np.diff(kps.conf) <= 0)
        assert np.all(kps.conf > 0)
        d = np.sqrt(((kps.xy[:, None] - kps.xy[None]) ** 2).sum(-1))
        np.fill_diagonal(d, np.inf)
        assert d.min() > 4.0

    def test_matches_filtered_full_nms(self, rng):
        hm = rng.uniform(-1, 1, (48, 48))
        full = nms(hm, radius=4)
        keep = full.conf > 0.0
        got = extract_keypoints(hm, n_max=10_000, min_confidence=0.0, radius=4)
        assert np.array_equal(got.xy, full.xy[keep])

    def test_translation_equivariance(self, rng):
        base = rng.uniform(0.1, 1.0, (32, 32))
        dx, dy = 9, 13
        canvas1 = np.full((64, 64), -1.0)
        canvas2 = np.full((64, 64), -1.0)
        canvas1[8:40, 8:40] = base
        canvas2[8 + dy:40 + dy, 8 + dx:40 + dx] = base
        k1 = extract_keypoints(canvas1, n_max=1000, min_confidence=0.0)
        k2 = extract_keypoints(canvas2, n_max=1000, min_confidence=0.0)
        assert np.array_equal(k1.xy + (dx, dy), k2.xy)
        assert np.array_equal(k1.conf, k2.conf)


class TestSampleDescriptors:
    def make_map(self, desc_grid, stride=4):
        gh, gw, _ = desc_grid.shape
        return DenseFeatureMap(source_w=gw * stride, source_h=gh * stride, stride=stride,
                               detector_logits=np.zeros((gh, gw, 2), np.float32),
                               descriptors=desc_grid.astype(np.float32))

    def test_cell_center_identity(self, rng):
        grid = rng.standard_normal((6, 6, 8))
        fm = self.make_map(grid)
        from retinareg.keypoints import KeypointSet
        kps = KeypointSet(xy=np.array([[4 * 2 + 1.5, 4 * 3 + 1.5]]), conf=np.ones(1))
        out = sample_descriptors(fm, kps)
        expected = grid[3, 2].astype(np.float64)
        expected = expected / np.linalg.norm(expected)
        assert np.allclose(out[0], expected, atol=1e-6)

    def test_midpoint_of_axis_vectors(self):
        grid = np.zeros((2, 2, 4))
        grid[0, 0, 0] = 1.0  # e1
        grid[0, 1, 1] = 1.0  # e2
        fm = self.make_map(grid)
        from retinareg.keypoints import KeypointSet
        # x halfway between cell centers (1.5 and 5.5) -> 3.5, y on row 0 centers
        kps = KeypointSet(xy=np.array([[3.5, 1.5]]), conf=np.ones(1))
        out = sample_descriptors(fm, kps)
        expected = np.array([np.sqrt(0.5), np.sqrt(0.5), 0.0, 0.0])
        assert np.allclose(out[0], expected, atol=1e-12)

    def test_uniform_grid(self, rng):
        vec = rng.standard_normal(8)
        grid = np.tile(vec, (5, 7, 1))
        fm = self.make_map(grid)
        from retinareg.keypoints import KeypointSet
        kps = KeypointSet(xy=rng.uniform(0, 19, (25, 2)), conf=np.ones(25))
        out = sample_descriptors(fm, kps)
        expected = vec.astype(np.float32).astype(np.float64)
        expected /= np.linalg.norm(expected)
        assert np.allclose(out, expected[None, :], atol=1e-6)

    def test_out_of_bounds(self):
        fm = self.make_map(np.zeros((4, 4, 4)))
        from retinareg.keypoints import KeypointSet
        with pytest.raises(OutOfBoundsError):
            sample_descriptors(fm, KeypointSet(xy=np.array([[16.0, 3.0]]), conf=np.ones(1)))

    def test_zero_rows_stay_zero(self):
        grid = np.zeros((3, 3, 4))
        fm = self.make_map(grid)
        from retinareg.keypoints import KeypointSet
        out = sample_descriptors(fm, KeypointSet(xy=np.array([[5.0, 5.0]]), conf=np.ones(1)))
        assert np.all(out == 0.0)
