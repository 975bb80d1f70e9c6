"""Scalar image-quality measures and reward shaping.

Everything here is a pure function of its inputs. ``ncc_local`` also
accepts torch tensors and stays differentiable in that case; the other
metrics are numpy-only and return plain floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

__all__ = [
    "SegmentationMap",
    "RewardConfig",
    "dice",
    "psnr",
    "ssim",
    "ncc_local",
    "kmeans_segment",
    "step_reward",
]


@dataclass
class SegmentationMap:
    """Integer label map with labels ``0..k-1`` sorted by cluster intensity.

    Label 0 is background (the lowest-intensity cluster).
    """

    labels: np.ndarray
    k: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be a [H, W] array")


@dataclass
class RewardConfig:
    metric: str = "dice"  # dice | psnr | ssim | neg_style
    mode: str = "improvement"  # improvement | absolute
    scale: float = 1.0

    def __post_init__(self):
        if self.metric not in ("dice", "psnr", "ssim", "neg_style"):
            raise ValueError(f"unknown reward metric {self.metric!r}")
        if self.mode not in ("improvement", "absolute"):
            raise ValueError(f"unknown reward mode {self.mode!r}")
        if self.scale <= 0:
            raise ValueError("reward scale must be positive")


def dice(u1: SegmentationMap, u2: SegmentationMap) -> float:
    """Mean Dice overlap over the non-background labels ``1..k-1``.

    A label that is empty in both maps counts as a perfect match (1.0).
    """
    if u1.k != u2.k:
        raise ValueError(f"label-count mismatch: {u1.k} vs {u2.k}")
    if u1.labels.shape != u2.labels.shape:
        raise ValueError("segmentation maps must share a shape")
    scores = []
    for label in range(1, u1.k):
        a = u1.labels == label
        b = u2.labels == label
        denom = a.sum() + b.sum()
        scores.append(1.0 if denom == 0 else 2.0 * np.logical_and(a, b).sum() / denom)
    return float(np.mean(scores))


def psnr(x, y, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at 100 for near-zero MSE."""
    if max_val <= 0:
        raise ValueError("max_val must be positive")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    mse = np.mean((x - y) ** 2)
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(max_val**2 / mse))


def _gaussian_kernel1d(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-(x**2) / (2.0 * sigma**2))
    return k / k.sum()


def ssim(x, y, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM over an 11x11 Gaussian window (dynamic range 1).

    Inputs are grayscale ``[H, W]`` arrays in [0, 1]; only windows fully
    inside the image contribute.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("ssim expects two [H, W] arrays of equal shape")
    if min(x.shape) < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    kern = _gaussian_kernel1d(window, sigma)
    kern2d = np.outer(kern, kern)

    def filt(img):
        t = torch.from_numpy(img)[None, None]
        k = torch.from_numpy(kern2d)[None, None]
        return F.conv2d(t, k)[0, 0].numpy()

    c1 = (k1 * 1.0) ** 2
    c2 = (k2 * 1.0) ** 2
    mu_x = filt(x)
    mu_y = filt(y)
    var_x = filt(x * x) - mu_x**2
    var_y = filt(y * y) - mu_y**2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def ncc_local(x, y, window: int = 9, eps: float = 1e-5):
    """Mean squared local correlation coefficient over a sliding window.

    Window statistics are sums over every ``window x window`` neighborhood
    fully inside the image (no padding, so constant offsets and gains cancel
    exactly); the squared cross term is divided by the product of the local
    variances plus ``eps``. Values are in [0, 1]. Torch tensors stay in the
    autograd graph; numpy inputs return a float.
    """
    if window % 2 != 1:
        raise ValueError("window must be odd")
    was_np = not isinstance(x, torch.Tensor)
    xt = torch.as_tensor(np.asarray(x, dtype=np.float64)) if was_np else x
    yt = torch.as_tensor(np.asarray(y, dtype=np.float64)) if not isinstance(y, torch.Tensor) else y
    if xt.dim() == 2:
        xt = xt[None, None]
        yt = yt[None, None]
    elif xt.dim() == 3:
        xt = xt[None]
        yt = yt[None]
    yt = yt.to(xt.dtype)
    if xt.shape != yt.shape:
        raise ValueError("ncc_local expects arrays of equal shape")

    n, ch, h, w = xt.shape
    if h < window or w < window:
        raise ValueError(f"image smaller than the {window}x{window} window")
    ones = torch.ones(1, 1, window, window, dtype=xt.dtype)
    win_size = float(window * window)

    def box(img):
        return F.conv2d(img.reshape(n * ch, 1, h, w), ones)

    sx = box(xt)
    sy = box(yt)
    sxx = box(xt * xt)
    syy = box(yt * yt)
    sxy = box(xt * yt)
    ux = sx / win_size
    uy = sy / win_size
    cross = sxy - uy * sx - ux * sy + ux * uy * win_size
    var_x = sxx - 2 * ux * sx + ux * ux * win_size
    var_y = syy - 2 * uy * sy + uy * uy * win_size
    cc = cross * cross / (var_x * var_y + eps)
    out = cc.mean()
    return float(out) if was_np else out


def kmeans_segment(image, k: int = 3, seed=None) -> SegmentationMap:
    """Lloyd's algorithm on pixel intensities with quantile initialization.

    Centroids start at the ``(i + 0.5) / k`` intensity quantiles, which makes
    the result deterministic for a fixed image (``seed`` is reserved for
    randomized restarts and is currently unused). Labels are re-indexed so
    centroid intensity increases with the label id; clusters may collapse on
    images with fewer than ``k`` distinct intensities.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("kmeans_segment expects a [H, W] image")
    flat = img.reshape(-1)
    centers = np.quantile(flat, (np.arange(k) + 0.5) / k)
    for _ in range(100):
        dist = np.abs(flat[:, None] - centers[None, :])
        assign = np.argmin(dist, axis=1)
        new_centers = centers.copy()
        for i in range(k):
            sel = flat[assign == i]
            if sel.size:
                new_centers[i] = sel.mean()
        shift = np.max(np.abs(new_centers - centers))
        centers = new_centers
        if shift < 1e-6:
            break
    order = np.argsort(centers, kind="stable")
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    labels = remap[assign].reshape(img.shape)
    return SegmentationMap(labels=labels, k=k)


def step_reward(prev_metric: float, curr_metric: float, cfg: RewardConfig) -> float:
    """Improvement-form (default) or absolute step reward."""
    if not (np.isfinite(prev_metric) and np.isfinite(curr_metric)):
        raise ValueError("metrics must be finite")
    if cfg.mode == "improvement":
        return cfg.scale * (curr_metric - prev_metric)
    return cfg.scale * curr_metric
