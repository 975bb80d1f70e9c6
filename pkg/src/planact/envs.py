"""Episodic environments for step-wise image translation.

Warping environments (digits, registration) accumulate the deformation
field across steps and always re-warp the ORIGINAL moving image with the
accumulated field, so interpolation blur never compounds. Rewards default
to the improvement form, which telescopes to (final - initial) metric over
an episode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import affine_transform, gaussian_filter

from .metrics import RewardConfig, SegmentationMap, dice, kmeans_segment, psnr, ssim, step_reward
from .warp import compose_fields, warp_image, warp_labels

__all__ = [
    "State",
    "EnvStep",
    "EpisodePair",
    "EpisodeConfig",
    "WarpEnv",
    "DigitsEnv",
    "RegistrationEnv",
    "InpaintEnv",
    "make_digits_pair",
    "make_synth_reg_pair",
    "binarize_segment",
]

TASKS = ("digits", "registration", "inpaint")


@dataclass
class State:
    """Float32 image stack in [0, 1] plus its task tag."""

    channels: np.ndarray
    task: str

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float32)
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if self.channels.ndim != 3:
            raise ValueError("state channels must be [C, H, W]")
        if not np.isfinite(self.channels).all():
            raise ValueError("state contains non-finite values")


@dataclass
class EnvStep:
    next_state: State
    reward: float
    done: bool
    info: dict


@dataclass
class EpisodePair:
    """One training/evaluation example.

    ``moving``/``fixed`` for warping tasks, ``ground_truth`` for inpainting;
    segmentations are filled in at reset when absent.
    """

    moving: np.ndarray | None = None
    fixed: np.ndarray | None = None
    seg_moving: SegmentationMap | None = None
    seg_fixed: SegmentationMap | None = None
    ground_truth: np.ndarray | None = None
    info: dict = field(default_factory=dict)


@dataclass
class EpisodeConfig:
    horizon: int
    reward: RewardConfig

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


def binarize_segment(image, threshold: float = 0.5) -> SegmentationMap:
    """Foreground/background split at an intensity threshold (digits)."""
    labels = (np.asarray(image) >= threshold).astype(np.int64)
    return SegmentationMap(labels=labels, k=2)


class WarpEnv:
    """Shared machinery for the digits and registration environments.

    The action is a ``[2, H, W]`` displacement field; the state stacks the
    current warped moving image with the fixed target.
    """

    task = "registration"

    def __init__(self, horizon: int = 20, reward: RewardConfig | None = None,
                 segment_k: int = 3):
        self.config = EpisodeConfig(horizon, reward or RewardConfig("dice"))
        self.segment_k = segment_k
        self.pair: EpisodePair | None = None
        self.last_info: dict = {}

    # -- segmentation -------------------------------------------------
    def _segment(self, image) -> SegmentationMap:
        return kmeans_segment(image, k=self.segment_k)

    # -- episode ------------------------------------------------------
    def reset(self, pair: EpisodePair) -> State:
        if pair.moving is None or pair.fixed is None:
            raise ValueError("warping episodes need moving and fixed images")
        if pair.moving.shape != pair.fixed.shape:
            raise ValueError("moving and fixed images must share a shape")
        self.pair = pair
        self.moving = np.asarray(pair.moving, dtype=np.float32)
        self.fixed = np.asarray(pair.fixed, dtype=np.float32)
        if pair.seg_moving is None:
            pair.seg_moving = self._segment(self.moving)
        if pair.seg_fixed is None:
            pair.seg_fixed = self._segment(self.fixed)
        self.omega = np.zeros((2,) + self.moving.shape, dtype=np.float32)
        self.t = 0
        self.done = False
        self._metric = self._current_metric(self.moving, pair.seg_moving.labels)
        self.last_info = {"step_index": 0, self.config.reward.metric: self._metric}
        return self._state(self.moving)

    def _state(self, moving_now) -> State:
        stack = np.stack([np.clip(moving_now, 0.0, 1.0), self.fixed])
        return State(channels=stack, task=self.task)

    def _current_metric(self, moving_now, seg_labels_now) -> float:
        cfg = self.config.reward
        if cfg.metric == "dice":
            warped = SegmentationMap(labels=seg_labels_now, k=self.pair.seg_moving.k)
            return dice(warped, self.pair.seg_fixed)
        if cfg.metric == "ssim":
            return ssim(moving_now, self.fixed)
        if cfg.metric == "psnr":
            return psnr(moving_now, self.fixed)
        raise ValueError(f"reward metric {cfg.metric!r} unsupported for warping tasks")

    @property
    def accumulated_field(self) -> np.ndarray:
        return self.omega

    def step(self, action: np.ndarray) -> EnvStep:
        if self.pair is None:
            raise RuntimeError("reset() must be called before step()")
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        action = np.asarray(action, dtype=np.float32)
        if action.shape != self.omega.shape:
            raise ValueError(f"action shape {action.shape} != {self.omega.shape}")
        self.omega = compose_fields(action, self.omega)
        moving_now = warp_image(self.moving[None], self.omega)[0]
        seg_now = warp_labels(self.pair.seg_moving.labels, self.omega)
        metric = self._current_metric(moving_now, seg_now)
        reward = step_reward(self._metric, metric, self.config.reward)
        self._metric = metric
        self.t += 1
        self.done = self.t >= self.config.horizon
        info = {"step_index": self.t, self.config.reward.metric: metric}
        self.last_info = info
        return EnvStep(self._state(moving_now), reward, self.done, info)


class RegistrationEnv(WarpEnv):
    task = "registration"


class DigitsEnv(WarpEnv):
    """Digit-to-digit transform; segmentation is a 0.5-threshold binarization."""

    task = "digits"

    def __init__(self, horizon: int = 10, reward: RewardConfig | None = None):
        super().__init__(horizon, reward or RewardConfig("dice"), segment_k=2)

    def _segment(self, image) -> SegmentationMap:
        return binarize_segment(image)


class InpaintEnv:
    """Center-crop inpainting: the action is the predicted image.

    The next state composites the action into the masked region of the
    original (hole-punched) image; the complement stays bitwise intact.
    """

    task = "inpaint"

    def __init__(self, horizon: int = 5, reward: RewardConfig | None = None,
                 mask_fraction: float = 0.5):
        self.config = EpisodeConfig(horizon, reward or RewardConfig("psnr", scale=1.0 / 50.0))
        if not 0.0 < mask_fraction < 1.0:
            raise ValueError("mask_fraction must be in (0, 1)")
        self.mask_fraction = mask_fraction
        self.pair: EpisodePair | None = None
        self.last_info: dict = {}

    def _make_mask(self, shape):
        c, h, w = shape
        mh, mw = int(round(h * self.mask_fraction)), int(round(w * self.mask_fraction))
        r0, c0 = (h - mh) // 2, (w - mw) // 2
        mask = np.zeros((1, h, w), dtype=np.float32)
        mask[:, r0:r0 + mh, c0:c0 + mw] = 1.0
        return mask

    def reset(self, pair: EpisodePair) -> State:
        if pair.ground_truth is None:
            raise ValueError("inpainting episodes need a ground-truth image")
        self.pair = pair
        self.truth = np.asarray(pair.ground_truth, dtype=np.float32)
        if self.truth.ndim != 3:
            raise ValueError("ground truth must be [C, H, W]")
        self.mask = self._make_mask(self.truth.shape)
        self.context = self.truth * (1.0 - self.mask)
        self.t = 0
        self.done = False
        self._metric = psnr(self.context, self.truth)
        self.last_info = {"step_index": 0, "psnr": self._metric}
        return State(channels=self.context.copy(), task=self.task)

    def step(self, action: np.ndarray) -> EnvStep:
        if self.pair is None:
            raise RuntimeError("reset() must be called before step()")
        if self.done:
            raise RuntimeError("episode is done; call reset()")
        action = np.asarray(action, dtype=np.float32)
        if action.shape != self.truth.shape:
            raise ValueError(f"action shape {action.shape} != {self.truth.shape}")
        composite = self.context + action * self.mask
        metric = psnr(composite, self.truth)
        reward = step_reward(self._metric, metric, self.config.reward)
        self._metric = metric
        self.t += 1
        self.done = self.t >= self.config.horizon
        info = {"step_index": self.t, "psnr": metric}
        self.last_info = info
        return EnvStep(State(channels=composite, task=self.task), reward, self.done, info)


# ---------------------------------------------------------------------------
# episode-pair generators


def make_digits_pair(dataset, mode: str, rng: np.random.Generator) -> EpisodePair:
    """Draw a digit pair: same class, different classes, or a deformed draw.

    ``random_xform`` additionally scales the moving image in [0.3, 1.7] and
    rotates it in [0, 360) degrees about the image center.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    labels = np.asarray(dataset.labels)
    if mode == "inner_class":
        counts = {lab: np.flatnonzero(labels == lab) for lab in np.unique(labels)}
        eligible = [lab for lab, idx in counts.items() if idx.size >= 2]
        lab = eligible[rng.integers(len(eligible))]
        i, j = rng.choice(counts[lab], size=2, replace=False)
    elif mode in ("cross_class", "random_xform"):
        uniq = np.unique(labels)
        la, lb = rng.choice(uniq, size=2, replace=False)
        i = rng.choice(np.flatnonzero(labels == la))
        j = rng.choice(np.flatnonzero(labels == lb))
    else:
        raise ValueError(f"unknown pair mode {mode!r}")
    moving = np.asarray(dataset.images[i], dtype=np.float32)
    fixed = np.asarray(dataset.images[j], dtype=np.float32)
    info = {"moving_label": int(labels[i]), "fixed_label": int(labels[j])}
    if mode == "random_xform":
        scale = float(rng.uniform(0.3, 1.7))
        angle = float(rng.uniform(0.0, 360.0))
        moving = scale_rotate(moving, scale, angle)
        info.update(scale=scale, angle=angle)
    return EpisodePair(moving=moving, fixed=fixed, info=info)


def scale_rotate(image: np.ndarray, scale: float, angle_deg: float) -> np.ndarray:
    """Scale and rotate about the image center (bilinear, zero background)."""
    theta = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    inv = rot.T / scale  # inverse of scale * R(theta)
    center = (np.asarray(image.shape) - 1) / 2.0
    offset = center - inv @ center
    out = affine_transform(np.asarray(image, dtype=np.float64), inv, offset=offset,
                           order=1, mode="constant", cval=0.0)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_synth_reg_pair(rng: np.random.Generator, smoothness: float = 8.0,
                        magnitude: float = 4.0, size: int = 64) -> EpisodePair:
    """Textured base image plus a known smooth deformation.

    The moving image is the base warped by a Gaussian-smoothed random field
    whose peak displacement is ``magnitude`` pixels (<= 8); the fixed image
    is the base itself. The generating field is stored under
    ``info["true_field"]``.
    """
    if magnitude > 8.0:
        raise ValueError("magnitude must be <= 8 px")
    base = _textured_image(rng, size)
    if magnitude == 0.0:
        field = np.zeros((2, size, size), dtype=np.float32)
    else:
        field = rng.normal(0.0, 1.0, size=(2, size, size))
        field = gaussian_filter(field, sigma=(0.0, smoothness, smoothness))
        peak = np.abs(field).max()
        field = (field * (magnitude / peak)).astype(np.float32)
    moving = warp_image(base[None], field)[0].astype(np.float32)
    return EpisodePair(moving=np.clip(moving, 0.0, 1.0), fixed=base,
                       info={"true_field": field})


def _textured_image(rng: np.random.Generator, size: int) -> np.ndarray:
    """Blobs plus gradients plus smooth noise, normalized to [0, 1]."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = 0.3 * (xx + yy) / (2 * size)
    for _ in range(6):
        cy, cx = rng.uniform(0.15 * size, 0.85 * size, size=2)
        sig = rng.uniform(size / 16, size / 6)
        amp = rng.uniform(0.4, 1.0)
        img += amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    img += gaussian_filter(rng.normal(0.0, 0.08, size=(size, size)), sigma=3.0)
    img -= img.min()
    img /= img.max()
    return img.astype(np.float32)
