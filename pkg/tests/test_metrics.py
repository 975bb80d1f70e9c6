import math

import numpy as np
import pytest

from planact.metrics import (RewardConfig, SegmentationMap, dice, kmeans_segment, ncc_local,
                             psnr, ssim, step_reward)

RNG = np.random.default_rng(11)


def seg(labels, k):
    return SegmentationMap(labels=np.asarray(labels), k=k)


class TestDice:
    def test_identical_maps(self):
        m = seg(RNG.integers(0, 3, size=(8, 8)), 3)
        assert dice(m, m) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, :2] = 1
        b[3, 2:] = 1
        assert dice(seg(a, 2), seg(b, 2)) == 0.0

    def test_hand_counted_overlap(self):
        # label-1 regions of 4 pixels each overlapping in 2 -> 2*2/(4+4)
        a = np.zeros((4, 4), dtype=int)
        b = np.zeros((4, 4), dtype=int)
        a[0, 0:4] = 1
        b[0, 2:4] = 1
        b[1, 0:2] = 1
        inter = np.logical_and(a == 1, b == 1).sum()
        assert inter == 2
        assert dice(seg(a, 2), seg(b, 2)) == 0.5

    def test_empty_empty_label_counts_as_one(self):
        a = np.zeros((4, 4), dtype=int)
        a[0, 0] = 1
        b = a.copy()
        # label 2 empty in both maps: mean of (1.0 for label 1, 1.0 for label 2)
        assert dice(seg(a, 3), seg(b, 3)) == 1.0

    def test_symmetry_and_range(self):
        for _ in range(20):
            a = seg(RNG.integers(0, 3, size=(6, 6)), 3)
            b = seg(RNG.integers(0, 3, size=(6, 6)), 3)
            d1, d2 = dice(a, b), dice(b, a)
            assert d1 == d2
            assert 0.0 <= d1 <= 1.0

    def test_k_mismatch_raises(self):
        with pytest.raises(ValueError):
            dice(seg(np.zeros((2, 2), int), 2), seg(np.zeros((2, 2), int), 3))


class TestPsnr:
    def test_identical_hits_cap(self):
        x = RNG.random((8, 8))
        assert psnr(x, x) == 100.0

    def test_mse_equal_to_peak_squared_gives_zero(self):
        x = np.zeros((4, 4))
        y = np.full((4, 4), 2.0)
        assert psnr(x, y, max_val=2.0) == pytest.approx(0.0, abs=1e-12)

    def test_hand_value_20db(self):
        x = np.zeros((10, 10))
        y = np.full((10, 10), 0.1)  # MSE 0.01, max_val 1 -> 10*log10(100)
        assert psnr(x, y, 1.0) == pytest.approx(20.0, abs=1e-12)

    def test_symmetry_and_monotonicity(self):
        x = RNG.random((8, 8))
        n1 = x + 0.01
        n2 = x + 0.05
        assert psnr(x, n1) == psnr(n1, x)
        assert psnr(x, n1) > psnr(x, n2)


def _ssim_naive(x, y, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Independent sliding-window reference (plain loops)."""
    half = (window - 1) / 2.0
    ax = np.arange(window) - half
    kern = np.exp(-(ax**2) / (2 * sigma**2))
    kern = np.outer(kern, kern) / np.outer(kern, kern).sum()
    c1, c2 = k1**2, k2**2
    h, w = x.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            px = x[i:i + window, j:j + window]
            py = y[i:i + window, j:j + window]
            mx = (kern * px).sum()
            my = (kern * py).sum()
            vx = (kern * px * px).sum() - mx**2
            vy = (kern * py * py).sum() - my**2
            cxy = (kern * px * py).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx**2 + my**2 + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestSsim:
    def test_self_similarity_is_one(self):
        x = RNG.random((16, 16))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_constant_images_luminance_only(self):
        x = np.zeros((12, 12))
        y = np.ones((12, 12))
        value = ssim(x, y)
        # closed form: C1 / (1 + C1) with C1 = 1e-4
        assert value == pytest.approx(1e-4 / (1 + 1e-4), rel=1e-9)
        assert value < 0.05

    def test_matches_naive_reference(self):
        x = RNG.random((20, 24))
        y = np.clip(x + RNG.normal(0, 0.1, x.shape), 0, 1)
        assert ssim(x, y) == pytest.approx(_ssim_naive(x, y), abs=1e-6)

    def test_symmetry(self):
        x = RNG.random((14, 14))
        y = RNG.random((14, 14))
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=1e-12)

    def test_too_small_image_raises(self):
        with pytest.raises(ValueError):
            ssim(np.zeros((8, 8)), np.zeros((8, 8)))


class TestNccLocal:
    def test_identical_nonconstant_near_one(self):
        x = RNG.random((32, 32))
        assert ncc_local(x, x) >= 0.999

    def test_affine_invariance(self):
        x = RNG.random((32, 32))
        y = 0.7 * x + 0.2
        assert ncc_local(x, y) >= 0.999

    def test_independent_images_low(self):
        x = RNG.random((64, 64))
        y = RNG.random((64, 64))
        assert ncc_local(x, y) < 0.2

    def test_even_window_rejected(self):
        with pytest.raises(ValueError):
            ncc_local(np.zeros((8, 8)), np.zeros((8, 8)), window=4)


class TestKmeansSegment:
    def test_three_separated_values(self):
        img = RNG.choice([0.0, 0.5, 1.0], size=(16, 16))
        m = kmeans_segment(img, k=3)
        assert (m.labels[img == 0.0] == 0).all()
        assert (m.labels[img == 0.5] == 1).all()
        assert (m.labels[img == 1.0] == 2).all()

    def test_constant_image_single_label(self):
        m = kmeans_segment(np.full((8, 8), 0.3), k=3)
        assert (m.labels == 0).all()

    def test_gaussian_mixture_matches_nearest_mean_oracle(self):
        means = np.array([0.1, 0.5, 0.9])
        comp = RNG.integers(0, 3, size=(40, 40))
        img = np.clip(RNG.normal(means[comp], 0.03), 0, 1)
        m = kmeans_segment(img, k=3)
        oracle = np.argmin(np.abs(img[..., None] - means), axis=-1)
        agreement = (m.labels == oracle).mean()
        assert agreement >= 0.99

    def test_labels_ordered_by_intensity(self):
        img = RNG.random((20, 20))
        m = kmeans_segment(img, k=3)
        centroids = [img[m.labels == i].mean() for i in range(3)]
        assert centroids == sorted(centroids)

    def test_k_below_two_rejected(self):
        with pytest.raises(ValueError):
            kmeans_segment(np.zeros((4, 4)), k=1)


class TestStepReward:
    def test_no_change_no_reward(self):
        cfg = RewardConfig("dice", "improvement", 1.0)
        assert step_reward(0.7, 0.7, cfg) == 0.0

    def test_dice_improvement(self):
        cfg = RewardConfig("dice", "improvement", 1.0)
        assert step_reward(0.80, 0.85, cfg) == pytest.approx(0.05, abs=1e-15)

    def test_absolute_mode(self):
        cfg = RewardConfig("psnr", "absolute", 2.0)
        assert step_reward(5.0, 17.0, cfg) == 34.0

    def test_telescoping_identity(self):
        cfg = RewardConfig("dice", "improvement", 1.0)
        metrics = RNG.random(21)
        total = sum(step_reward(metrics[i], metrics[i + 1], cfg) for i in range(20))
        assert total == pytest.approx(metrics[-1] - metrics[0], abs=1e-12)

    def test_non_finite_rejected(self):
        cfg = RewardConfig("dice")
        with pytest.raises(ValueError):
            step_reward(math.nan, 1.0, cfg)
