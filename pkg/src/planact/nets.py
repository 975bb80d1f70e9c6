"""Planner, actor, and critic networks plus the stochastic plan machinery.

The two-step policy runs state -> plan -> action: the planner emits a
diagonal Gaussian over a low-dimensional plan (a small spatial map for
warping tasks, a vector for image synthesis), the actor decodes a sampled
plan into the full-resolution action, reusing the planner's encoder
features through skip connections. The critic scores (state, plan) pairs.

All forward passes are pure functions of (parameters, inputs); parameter
updates are owned by the training loop.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

__all__ = [
    "LOG_STD_MIN",
    "LOG_STD_MAX",
    "PlanDistribution",
    "sample_plan",
    "gaussian_log_prob",
    "SpatialPlanner",
    "SpatialActor",
    "SpatialCritic",
    "ActionCritic",
    "VectorPlanner",
    "VectorActor",
    "VectorCritic",
    "PolicyNetworks",
    "build_networks",
]

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0


def gaussian_log_prob(value, mean, log_std):
    """Sum of elementwise diagonal-Gaussian log densities per sample.

    Single samples are vectors ``[D]`` or maps ``[C, H, W]`` and reduce to a
    scalar; batched inputs ``[N, D]`` / ``[N, C, H, W]`` reduce to ``[N]``.
    """
    elem = (-0.5 * ((value - mean) / torch.exp(log_std)) ** 2
            - log_std - 0.5 * math.log(2.0 * math.pi))
    if elem.dim() in (2, 4):
        return elem.flatten(1).sum(-1)
    return elem.sum()


@dataclass
class PlanDistribution:
    """Diagonal Gaussian over the plan space, ``log_std`` clamped to [-10, 2]."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        if self.mean.shape != self.log_std.shape:
            raise ValueError("mean and log_std must share a shape")
        self.log_std = self.log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)

    def rsample(self, noise=None, generator=None):
        """Reparameterized sample and its log density.

        ``noise`` defaults to a fresh standard normal draw; pass it
        explicitly for deterministic replays.
        """
        if noise is None:
            noise = torch.randn(self.mean.shape, generator=generator, dtype=self.mean.dtype)
        return sample_plan(self, noise)

    def log_prob(self, plan):
        return gaussian_log_prob(plan, self.mean, self.log_std)

    def mode(self):
        return self.mean

    def entropy(self):
        """Closed-form differential entropy, summed over plan elements."""
        per = self.log_std + 0.5 * (1.0 + math.log(2.0 * math.pi))
        if per.dim() in (2, 4):
            return per.flatten(1).sum(-1)
        return per.sum()


def sample_plan(dist: PlanDistribution, noise):
    """Reparameterize: ``plan = mean + exp(log_std) * noise``.

    Returns ``(plan, log_prob)``; both carry gradients w.r.t. the
    distribution parameters.
    """
    if noise.shape != dist.mean.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != plan shape {tuple(dist.mean.shape)}")
    plan = dist.mean + torch.exp(dist.log_std) * noise
    return plan, gaussian_log_prob(plan, dist.mean, dist.log_std)


def _conv(c_in, c_out):
    return nn.Conv2d(c_in, c_out, 3, padding=1)


class SpatialPlanner(nn.Module):
    """Conv encoder emitting a one-channel plan distribution at 1/2^L scale.

    Each level is a 3x3 conv + LeakyReLU(0.2) followed by 2x max-pooling;
    pre-pool activations are returned as skip features for the actor.
    """

    def __init__(self, in_channels=2, widths=(16, 32), plan_channels=1):
        super().__init__()
        self.widths = tuple(widths)
        c = in_channels
        self.encoder = nn.ModuleList()
        for w in widths:
            self.encoder.append(_conv(c, w))
            c = w
        self.head_mean = _conv(c, plan_channels)
        self.head_log_std = _conv(c, plan_channels)
        # start moderately exploratory; the temperature servo takes over
        nn.init.constant_(self.head_log_std.bias, -2.0)

    def forward(self, state):
        x, squeeze = _ensure_batch(state)
        skips = []
        for conv in self.encoder:
            x = F.leaky_relu(conv(x), 0.2)
            skips.append(x)
            x = F.max_pool2d(x, 2)
        mean = self.head_mean(x)
        log_std = self.head_log_std(x)
        if squeeze:
            mean, log_std = mean.squeeze(0), log_std.squeeze(0)
            skips = [s.squeeze(0) for s in skips]
        return mean, log_std, skips


class SpatialActor(nn.Module):
    """Decodes a spatial plan into a dense action map via nearest upsampling.

    Consumes the planner's skip features one per level. The final layer is
    zero-initialized so warping tasks start at the identity transform. With
    ``stochastic=True`` an extra head provides a per-pixel log-std for the
    Gaussian-action variant.
    """

    def __init__(self, plan_channels=1, enc_widths=(16, 32), out_channels=2,
                 zero_init_last=True, stochastic=False):
        super().__init__()
        self.enc_widths = tuple(enc_widths)
        self.stochastic = stochastic
        bottom = enc_widths[-1]
        self.conv_in = _conv(plan_channels, bottom)
        self.decoder = nn.ModuleList()
        c = bottom
        dec_widths = list(reversed(enc_widths))
        for skip_c, w in zip(dec_widths, dec_widths[1:] + [max(dec_widths[-1] // 2, 8)]):
            self.decoder.append(_conv(c + skip_c, w))
            c = w
        self.head = _conv(c, out_channels)
        if zero_init_last:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)
        if stochastic:
            self.head_log_std = _conv(c, out_channels)
            nn.init.zeros_(self.head_log_std.weight)
            nn.init.zeros_(self.head_log_std.bias)

    def _decode(self, plan, skips):
        if skips is None or len(skips) != len(self.decoder):
            raise ValueError("actor requires one skip feature per decoder level")
        x, squeeze = _ensure_batch(plan)
        feats = [_ensure_batch(s)[0] for s in skips]
        x = F.leaky_relu(self.conv_in(x), 0.2)
        for conv, skip in zip(self.decoder, reversed(feats)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(torch.cat([x, skip], dim=1)), 0.2)
        return x, squeeze

    def forward(self, plan, skips):
        x, squeeze = self._decode(plan, skips)
        out = self.head(x)
        return out.squeeze(0) if squeeze else out

    def action_distribution(self, plan, skips):
        if not self.stochastic:
            raise RuntimeError("actor was built without a Gaussian output head")
        x, squeeze = self._decode(plan, skips)
        mean = self.head(x)
        log_std = self.head_log_std(x).clamp(LOG_STD_MIN, LOG_STD_MAX)
        if squeeze:
            mean, log_std = mean.squeeze(0), log_std.squeeze(0)
        return mean, log_std


class SpatialCritic(nn.Module):
    """Soft-Q over (state, spatial plan).

    The state is encoded to the plan resolution, the plan is appended as an
    extra channel, and a conv + pooled MLP head produces the scalar.
    """

    def __init__(self, in_channels=2, widths=(16, 32), plan_channels=1, hidden=32):
        super().__init__()
        c = in_channels
        self.encoder = nn.ModuleList()
        for w in widths:
            self.encoder.append(_conv(c, w))
            c = w
        self.mix = _conv(c + plan_channels, hidden)
        self.fc1 = nn.Linear(hidden, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, state, plan):
        x, squeeze = _ensure_batch(state)
        p, _ = _ensure_batch(plan)
        for conv in self.encoder:
            x = F.max_pool2d(F.leaky_relu(conv(x), 0.2), 2)
        x = F.leaky_relu(self.mix(torch.cat([x, p], dim=1)), 0.2)
        x = x.mean(dim=(-1, -2))
        x = F.leaky_relu(self.fc1(x), 0.2)
        q = self.fc2(x).squeeze(-1)
        return q.squeeze(0) if squeeze else q


class ActionCritic(nn.Module):
    """Soft-Q over (state, dense action) for the critic-on-actor variant.

    The action map is concatenated onto the state channels at the input.
    """

    def __init__(self, state_channels=2, action_channels=2, widths=(16, 32), hidden=32):
        super().__init__()
        c = state_channels + action_channels
        self.encoder = nn.ModuleList()
        for w in widths:
            self.encoder.append(_conv(c, w))
            c = w
        self.fc1 = nn.Linear(c, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, state, action):
        x, squeeze = _ensure_batch(state)
        a, _ = _ensure_batch(action)
        x = torch.cat([x, a], dim=1)
        for conv in self.encoder:
            x = F.max_pool2d(F.leaky_relu(conv(x), 0.2), 2)
        x = x.mean(dim=(-1, -2))
        q = self.fc2(F.leaky_relu(self.fc1(x), 0.2)).squeeze(-1)
        return q.squeeze(0) if squeeze else q


class VectorPlanner(nn.Module):
    """4x4 stride-2 conv encoder emitting a plan vector distribution."""

    def __init__(self, in_channels=1, image_size=32, widths=(32, 64, 64), plan_dim=256):
        super().__init__()
        c = in_channels
        size = image_size
        self.encoder = nn.ModuleList()
        for w in widths:
            self.encoder.append(nn.Conv2d(c, w, 4, stride=2, padding=1))
            c = w
            size //= 2
        self.head_mean = nn.Linear(c * size * size, plan_dim)
        self.head_log_std = nn.Linear(c * size * size, plan_dim)
        nn.init.constant_(self.head_log_std.bias, -2.0)

    def forward(self, state):
        x, squeeze = _ensure_batch(state)
        skips = []
        for conv in self.encoder:
            x = F.leaky_relu(conv(x), 0.2)
            skips.append(x)
        flat = x.flatten(1)
        mean = self.head_mean(flat)
        log_std = self.head_log_std(flat)
        if squeeze:
            mean, log_std = mean.squeeze(0), log_std.squeeze(0)
            skips = [s.squeeze(0) for s in skips]
        return mean, log_std, skips[:-1]


class VectorActor(nn.Module):
    """Decodes a plan vector into an image in [0, 1] (sigmoid output)."""

    def __init__(self, plan_dim=256, out_channels=1, image_size=32, enc_widths=(32, 64, 64)):
        super().__init__()
        self.bottom_size = image_size // 2 ** len(enc_widths)
        bottom = enc_widths[-1]
        self.bottom_channels = bottom
        self.fc_in = nn.Linear(plan_dim, bottom * self.bottom_size**2)
        skip_cs = list(reversed(enc_widths[:-1]))  # skips exclude the bottleneck
        self.decoder = nn.ModuleList()
        c = bottom
        for skip_c in skip_cs:
            self.decoder.append(_conv(c + skip_c, skip_c))
            c = skip_c
        self.up_final = _conv(c, max(c // 2, 8))
        self.head = _conv(max(c // 2, 8), out_channels)

    def forward(self, plan, skips):
        if skips is None or len(skips) != len(self.decoder):
            raise ValueError("actor requires one skip feature per decoder level")
        x, squeeze = _ensure_batch(plan, vector=True)
        feats = [_ensure_batch(s)[0] for s in skips]
        x = F.leaky_relu(self.fc_in(x), 0.2)
        x = x.reshape(-1, self.bottom_channels, self.bottom_size, self.bottom_size)
        for conv, skip in zip(self.decoder, reversed(feats)):
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = F.leaky_relu(conv(torch.cat([x, skip], dim=1)), 0.2)
        x = F.interpolate(x, scale_factor=2, mode="nearest")
        x = F.leaky_relu(self.up_final(x), 0.2)
        out = torch.sigmoid(self.head(x))
        return out.squeeze(0) if squeeze else out


class VectorCritic(nn.Module):
    """Soft-Q over (state, plan vector): encode, flatten, concat, MLP."""

    def __init__(self, in_channels=1, image_size=32, widths=(32, 64, 64), plan_dim=256, hidden=128):
        super().__init__()
        c = in_channels
        size = image_size
        self.encoder = nn.ModuleList()
        for w in widths:
            self.encoder.append(nn.Conv2d(c, w, 4, stride=2, padding=1))
            c = w
            size //= 2
        self.fc1 = nn.Linear(c * size * size + plan_dim, hidden)
        self.fc2 = nn.Linear(hidden, 1)

    def forward(self, state, plan):
        x, squeeze = _ensure_batch(state)
        p, _ = _ensure_batch(plan, vector=True)
        for conv in self.encoder:
            x = F.leaky_relu(conv(x), 0.2)
        x = torch.cat([x.flatten(1), p], dim=1)
        q = self.fc2(F.leaky_relu(self.fc1(x), 0.2)).squeeze(-1)
        return q.squeeze(0) if squeeze else q


def _ensure_batch(t, vector=False):
    want = 1 if vector else 3
    if t.dim() == want:
        return t.unsqueeze(0), True
    return t, False


@dataclass
class PolicyNetworks:
    """Bundle of planner/actor/critic plus the EMA target critic.

    ``target_critic`` mirrors the critic's structure and is only ever
    written by ``merl.update_target``. ``q_value``/``target_q`` take the
    plan for the standard setup and the dense action when built with
    ``critic_on_actor=True``.
    """

    planner: nn.Module
    actor: nn.Module
    critic: nn.Module
    target_critic: nn.Module
    plan_shape: tuple
    action_shape: tuple
    critic_on_actor: bool = False
    extra: dict = field(default_factory=dict)

    def plan_distribution(self, state):
        mean, log_std, skips = self.planner(state)
        return PlanDistribution(mean, log_std), skips

    def decode_action(self, plan, skips):
        return self.actor(plan, skips)

    def q_value(self, state, plan_or_action):
        return self.critic(state, plan_or_action)

    def target_q(self, state, plan_or_action):
        return self.target_critic(state, plan_or_action)

    def parameters_of(self, which: str):
        return getattr(self, which).parameters()

    def to_dtype(self, dtype):
        for m in (self.planner, self.actor, self.critic, self.target_critic):
            m.to(dtype)
        return self


def build_networks(task: str, image_size: int, in_channels: int = 2,
                   base_width: int = 16, plan_dim: int = 256,
                   action_channels: int = 2, seed: int = 0,
                   critic_on_actor: bool = False) -> PolicyNetworks:
    """Construct the task's network bundle with seeded initialization.

    Warping tasks get spatial nets (two encoder levels at 28 px, four at
    >= 64 px so the plan stays low-dimensional); inpainting gets the
    stride-2 vector nets. The target critic starts as an exact copy.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        if task in ("digits", "registration"):
            levels = 2 if task == "digits" else 4
            widths = (base_width,) + (2 * base_width,) * (levels - 1)
            reduction = 2**levels
            if image_size % reduction:
                raise ValueError(f"image size {image_size} not divisible by {reduction}")
            plan_hw = image_size // reduction
            planner = SpatialPlanner(in_channels, widths, plan_channels=1)
            actor = SpatialActor(1, widths, out_channels=action_channels,
                                 stochastic=critic_on_actor)
            if critic_on_actor:
                critic = ActionCritic(in_channels, action_channels, widths)
                target = ActionCritic(in_channels, action_channels, widths)
            else:
                critic = SpatialCritic(in_channels, widths, plan_channels=1,
                                       hidden=2 * base_width)
                target = SpatialCritic(in_channels, widths, plan_channels=1,
                                       hidden=2 * base_width)
            plan_shape = (1, plan_hw, plan_hw)
            action_shape = (action_channels, image_size, image_size)
        elif task == "inpaint":
            widths = (2 * base_width, 4 * base_width, 4 * base_width)
            if critic_on_actor:
                raise ValueError("critic_on_actor is only supported for warping tasks")
            planner = VectorPlanner(in_channels, image_size, widths, plan_dim)
            actor = VectorActor(plan_dim, action_channels, image_size, widths)
            critic = VectorCritic(in_channels, image_size, widths, plan_dim)
            target = VectorCritic(in_channels, image_size, widths, plan_dim)
            plan_shape = (plan_dim,)
            action_shape = (action_channels, image_size, image_size)
        else:
            raise ValueError(f"unknown task {task!r}")
    target.load_state_dict(critic.state_dict())
    for p in target.parameters():
        p.requires_grad_(False)
    return PolicyNetworks(planner, actor, critic, target, plan_shape, action_shape,
                          critic_on_actor=critic_on_actor)
