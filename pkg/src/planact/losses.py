"""Differentiable auxiliary objectives for the planner-actor pair.

Reconstruction, adversarial, total-variation, Gram/content/style, the
compound temporal consistency penalty with its synthetic-motion generator,
and the similarity+smoothness registration objective. All losses are torch
scalars in the autograd graph.
"""

from __future__ import annotations

import hashlib

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter
from torch import nn

from .metrics import ncc_local
from .warp import spatial_gradient, warp_image

__all__ = [
    "reconstruction_loss",
    "adversarial_losses",
    "total_variation",
    "gram_matrix",
    "content_loss",
    "style_loss",
    "nst_objective",
    "make_random_motion",
    "compound_temporal",
    "registration_objective",
    "combined_aux",
    "Discriminator",
    "FeatureExtractor",
]

_LOG_EPS = 1e-8


def reconstruction_loss(pred, target, norm: str = "l2"):
    """Mean elementwise L1 or L2 distance."""
    diff = pred - target
    if norm == "l1":
        return diff.abs().mean()
    if norm == "l2":
        return diff.pow(2).mean()
    raise ValueError(f"unknown norm {norm!r}")


def adversarial_losses(d_real, d_fake):
    """Discriminator and (non-saturating) generator losses from probabilities.

    ``disc = -E[log d_real + log(1 - d_fake)]``, ``gen = -E[log d_fake]``.
    Probabilities are clamped to [1e-8, 1 - 1e-8] so both losses stay finite
    and strictly positive even when the discriminator saturates.
    """
    real = d_real.clamp(_LOG_EPS, 1.0 - _LOG_EPS)
    fake = d_fake.clamp(_LOG_EPS, 1.0 - _LOG_EPS)
    disc = -(torch.log(real).mean() + torch.log(1.0 - fake).mean())
    gen = -torch.log(fake).mean()
    return disc, gen


def total_variation(x):
    """Mean squared forward difference over both spatial directions."""
    if x.shape[-1] < 2 or x.shape[-2] < 2:
        raise ValueError("total_variation needs at least a 2x2 image")
    dr = x[..., 1:, :] - x[..., :-1, :]
    dc = x[..., :, 1:] - x[..., :, :-1]
    return (dr.pow(2).sum() + dc.pow(2).sum()) / (dr.numel() + dc.numel())


def gram_matrix(features):
    """Channel correlation matrix ``F F^T / (C H W)`` of a [C, H, W] map."""
    if features.dim() == 4:
        n, c, h, w = features.shape
        flat = features.reshape(n, c, h * w)
        return flat @ flat.transpose(1, 2) / (c * h * w)
    c, h, w = features.shape
    flat = features.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


def content_loss(feat_m, feat_c):
    """Squared feature distance at one layer, normalized by C*H*W."""
    if feat_m.shape != feat_c.shape:
        raise ValueError("content features must share a shape")
    norm = feat_m.shape[-1] * feat_m.shape[-2] * feat_m.shape[-3]
    per = (feat_m - feat_c).pow(2).sum(dim=(-1, -2, -3)) / norm
    return per.mean()


def style_loss(feats_m, feats_e):
    """Sum over layers of the squared Frobenius Gram difference."""
    if len(feats_m) != len(feats_e):
        raise ValueError("layer sets must match")
    total = 0.0
    for fm, fe in zip(feats_m, feats_e):
        gm = gram_matrix(fm)
        ge = gram_matrix(fe)
        total = total + (gm - ge).pow(2).sum(dim=(-1, -2)).mean()
    return total


def nst_objective(m, c, e, extractor, lambda_: float = 1e5, beta: float = 1e-7):
    """Content + weighted style + weighted total-variation objective.

    ``m`` is the moving (stylized) image, ``c`` the content image, ``e`` the
    style exemplar. Defaults keep style and smoothness terms at the shipped
    weighting (1e5, 1e-7).
    """
    feats_m = extractor(m)
    feats_c = extractor(c)
    feats_e = extractor(e)
    co = content_loss(feats_m[extractor.content_layer], feats_c[extractor.content_layer])
    st = style_loss(feats_m, feats_e)
    return co + lambda_ * st + beta * total_variation(m)


def make_random_motion(shape, seed=None):
    """Synthetic smooth motion: low-res Gaussian wavy twists plus a translation.

    A ``[2, ~H/100, ~W/100]`` Gaussian map (std 0.001) is upsampled to the
    frame size, blurred (kernel ~100 px at 256-px frames), and shifted by a
    uniform translation in [-10, 10] px per axis. Below 256 px the blur
    kernel and the translation range shrink proportionally so the motion
    stays in scale; the translation magnitude never exceeds 10 px.
    """
    h, w = int(shape[0]), int(shape[1])
    rng = np.random.default_rng(seed)
    scale = min(1.0, max(h, w) / 256.0)
    gh, gw = max(1, round(h / 100)), max(1, round(w / 100))
    wavy = rng.normal(0.0, 0.001, size=(2, gh, gw))
    wavy = F.interpolate(torch.as_tensor(wavy)[None], size=(h, w),
                         mode="bilinear", align_corners=False)[0].numpy()
    ksize = max(3, round(100 * scale))
    wavy = gaussian_filter(wavy, sigma=(0.0, ksize / 6.0, ksize / 6.0))
    translation = rng.uniform(-10.0, 10.0, size=2) * scale
    return torch.as_tensor(wavy + translation[:, None, None])


def compound_temporal(state, policy_fn, motion_seed, noise_sigma=None):
    """Consistency between "perturb then stylize" and "stylize then perturb".

    A random motion field and Gaussian pixel noise perturb the input frame;
    the policy output on the perturbed frame is compared (L1) against the
    motion-warped output on the clean frame. ``noise_sigma=None`` draws
    sigma from U(0.001, 0.002).
    """
    rng = np.random.default_rng(motion_seed)
    motion = make_random_motion(state.shape[-2:], seed=motion_seed)
    if noise_sigma is None:
        noise_sigma = rng.uniform(0.001, 0.002)
    stylized = policy_fn(state)
    moved = warp_image(state, motion)
    delta = torch.as_tensor(rng.normal(0.0, 1.0, size=tuple(moved.shape)),
                            dtype=moved.dtype) * noise_sigma
    out = policy_fn(moved + delta)
    target = warp_image(stylized, motion)
    return (out - target).abs().mean()


def registration_objective(i_f, i_m, omega, lambda_: float = 1.0):
    """Negative local NCC similarity plus weighted field smoothness.

    ``-NCC(i_f, i_m warped by omega) + lambda * mean ||grad(omega)||^2``;
    the smoothness term is the per-pixel squared Frobenius norm of the
    displacement gradient, averaged over pixels.
    """
    warped = warp_image(i_m, omega)
    sim = ncc_local(i_f, warped)
    g = spatial_gradient(omega)
    smooth = g.pow(2).sum(dim=(-4, -3)).mean()
    return -sim + lambda_ * smooth


def combined_aux(rec, adv, weight_rec: float = 1.0, weight_adv: float = 0.02):
    """Weighted sum of the reconstruction and adversarial generator terms."""
    return weight_rec * rec + weight_adv * adv


class Discriminator(nn.Module):
    """4x4 stride-2 convolution stack ending in a scalar probability."""

    def __init__(self, in_channels: int = 1, image_size: int = 32, widths=(32, 64, 64)):
        super().__init__()
        layers = []
        c = in_channels
        size = image_size
        for w in widths:
            layers += [nn.Conv2d(c, w, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            c = w
            size //= 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(c * size * size, 1)

    def forward(self, x):
        if x.dim() == 3:
            x = x.unsqueeze(0)
        f = self.features(x)
        return torch.sigmoid(self.head(f.flatten(1))).squeeze(-1)


class FeatureExtractor(nn.Module):
    """Fixed convolutional feature stack exposing four tap layers.

    Weights are seeded at construction and never trained; externally
    computed weights (e.g. from a pretrained network) can be loaded from a
    named-array ``.npz`` container whose keys follow ``state_dict`` names.
    """

    content_layer = 1

    def __init__(self, in_channels: int = 1, widths=(16, 32, 64, 64), seed: int = 0):
        super().__init__()
        if len(widths) != 4:
            raise ValueError("the extractor exposes exactly four tap layers")
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            c = in_channels
            blocks = []
            for w in widths:
                blocks.append(nn.Conv2d(c, w, 3, padding=1))
                c = w
            self.blocks = nn.ModuleList(blocks)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, x):
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        feats = []
        for i, conv in enumerate(self.blocks):
            x = F.leaky_relu(conv(x.to(conv.weight.dtype)), 0.2)
            feats.append(x.squeeze(0) if squeeze else x)
            if i < len(self.blocks) - 1:
                x = F.max_pool2d(x, 2)
        return feats

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().astype(np.float64).tobytes())
        return h.hexdigest()

    def save_weights(self, path):
        np.savez(path, **{k: v.detach().cpu().numpy() for k, v in self.state_dict().items()})

    def load_weights(self, path):
        arrays = np.load(path)
        state = self.state_dict()
        if set(arrays.files) != set(state):
            raise ValueError("weight container does not match the extractor layout")
        for k in state:
            if tuple(arrays[k].shape) != tuple(state[k].shape):
                raise ValueError(f"shape mismatch for {k}")
            state[k] = torch.as_tensor(arrays[k])
        self.load_state_dict(state)
        for p in self.parameters():
            p.requires_grad_(False)
