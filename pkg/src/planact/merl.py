"""Maximum-entropy RL optimization over the plan space.

Replay storage, the soft Bellman critic update, the reparameterized
planner update, target-network tracking, automatic temperature, the joint
auxiliary step, and the appendix-style variant where the critic evaluates
dense actions instead of plans.

All loss functions accept an optional ``generator`` (or explicit noise
tensors) so a seeded run is exactly reproducible.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import torch

from .nets import PolicyNetworks, gaussian_log_prob, sample_plan

__all__ = [
    "Transition",
    "ReplayPool",
    "Batch",
    "TemperatureState",
    "NonFiniteLossError",
    "make_optimizer",
    "critic_loss",
    "critic_step",
    "planner_loss",
    "planner_step",
    "update_target",
    "temperature_step",
    "aux_step",
    "critic_on_actor_losses",
]


class NonFiniteLossError(RuntimeError):
    """A loss or gradient stopped being finite; carries diagnostics."""


@dataclass
class Transition:
    """One (s, p, a, r, s', done) record; ``extras`` carries task arrays
    (accumulated field, original moving image, ...) the auxiliary loss needs."""

    state: np.ndarray
    plan: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.reward):
            raise ValueError("reward must be finite")


@dataclass
class Batch:
    """Stacked transitions as torch tensors."""

    states: torch.Tensor
    plans: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_states: torch.Tensor
    dones: torch.Tensor
    extras: dict = field(default_factory=dict)

    def __len__(self):
        return self.states.shape[0]


class ReplayPool:
    """FIFO ring buffer with uniform with-replacement sampling."""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._entries: list[Transition] = []
        self._cursor = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return len(self._entries)

    def push(self, transition: Transition):
        if len(self._entries) < self.capacity:
            self._entries.append(transition)
        else:
            self._entries[self._cursor] = transition
            self._cursor = (self._cursor + 1) % self.capacity
        return self

    def entries(self):
        """Entries oldest-first."""
        return self._entries[self._cursor:] + self._entries[:self._cursor]

    def sample_indices(self, n: int) -> np.ndarray:
        if not self._entries:
            raise ValueError("cannot sample from an empty pool")
        return self.rng.integers(0, len(self._entries), size=n)

    def sample(self, batch_size: int, dtype=torch.float32) -> Batch:
        idx = self.sample_indices(batch_size)
        picked = [self._entries[i] for i in idx]

        def stack(get):
            return torch.as_tensor(np.stack([get(t) for t in picked])).to(dtype)

        extras = {k: stack(lambda t, k=k: t.extras[k]) for k in picked[0].extras}
        return Batch(
            states=stack(lambda t: t.state),
            plans=stack(lambda t: t.plan),
            actions=stack(lambda t: t.action),
            rewards=stack(lambda t: np.asarray(t.reward)),
            next_states=stack(lambda t: t.next_state),
            dones=stack(lambda t: np.asarray(float(t.done))),
            extras=extras,
        )


@dataclass
class TemperatureState:
    """Entropy temperature: ``alpha = exp(log_alpha)``, tuned toward
    ``target_entropy``."""

    log_alpha: torch.Tensor
    target_entropy: float

    @staticmethod
    def create(initial_alpha: float = 0.2, target_entropy: float = -1.0):
        log_alpha = torch.tensor(float(np.log(initial_alpha)), requires_grad=True)
        return TemperatureState(log_alpha=log_alpha, target_entropy=float(target_entropy))

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.detach().exp())


def make_optimizer(params, lr: float, method: str = "adam"):
    """Adam by default; ``sgd`` gives the plain-gradient-descent mode whose
    single step is exactly ``param - lr * grad``."""
    params = list(params)
    if method == "adam":
        return torch.optim.Adam(params, lr=lr)
    if method == "sgd":
        return torch.optim.SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {method!r}")


@contextmanager
def _frozen(*modules):
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, req in saved:
            p.requires_grad_(req)


def _require_finite(name, *tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            bad = t[~torch.isfinite(t)]
            raise NonFiniteLossError(
                f"{name}: {bad.numel()} non-finite values "
                f"(first={bad.flatten()[0].item()!r}, shape={tuple(t.shape)})")


def _check_grads(name, module):
    for p in module.parameters():
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteLossError(f"{name}: non-finite gradient in {tuple(p.shape)} parameter")


def critic_loss(batch: Batch, nets: PolicyNetworks, alpha: float, gamma: float,
                noise=None, generator=None):
    """Soft Bellman residual ``mean 0.5 (Q(s, p) - y)^2``.

    ``y = r + gamma * (1 - done) * (Q_target(s', p') - alpha * log k(p'|s'))``
    with ``p'`` freshly sampled from the planner; the target carries no
    gradient.
    """
    if nets.critic_on_actor:
        raise ValueError("use critic_on_actor_losses for the action-critic variant")
    q = nets.q_value(batch.states, batch.plans)
    with torch.no_grad():
        dist, _ = nets.plan_distribution(batch.next_states)
        if noise is None:
            noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
        next_plan, next_logp = sample_plan(dist, noise)
        boot_q = nets.target_q(batch.next_states, next_plan)
        if "target_critic2" in nets.extra:  # optional twin-Q clipping
            boot_q = torch.minimum(boot_q, nets.extra["target_critic2"](batch.next_states, next_plan))
        y = batch.rewards + gamma * (1.0 - batch.dones) * (boot_q - alpha * next_logp)
    _require_finite("critic_loss", q, y)
    loss = 0.5 * (q - y).pow(2).mean()
    if "critic2" in nets.extra:
        q2 = nets.extra["critic2"](batch.states, batch.plans)
        loss = loss + 0.5 * (q2 - y).pow(2).mean()
    return loss


def critic_step(batch, nets, alpha, gamma, optimizer, noise=None, generator=None) -> float:
    """One optimizer step on the critic; planner/actor/target untouched."""
    optimizer.zero_grad()
    loss = critic_loss(batch, nets, alpha, gamma, noise=noise, generator=generator)
    loss.backward()
    _check_grads("critic_step", nets.critic)
    optimizer.step()
    return float(loss.detach())


def _policy_objective(batch, nets, alpha, noise, generator):
    if nets.critic_on_actor:
        raise ValueError("use critic_on_actor_losses for the action-critic variant")
    dist, _ = nets.plan_distribution(batch.states)
    if noise is None:
        noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
    plan, logp = sample_plan(dist, noise)
    critics = [nets.critic] + ([nets.extra["critic2"]] if "critic2" in nets.extra else [])
    with _frozen(*critics):
        q = nets.q_value(batch.states, plan)
        if "critic2" in nets.extra:
            q = torch.minimum(q, nets.extra["critic2"](batch.states, plan))
    _require_finite("planner_loss", q, logp)
    return (alpha * logp - q).mean(), logp


def planner_loss(batch, nets, alpha, noise=None, generator=None):
    """Reparameterized policy-improvement objective.

    ``mean(alpha * log k(p|s) - Q(s, p))`` with ``p = mean + std * eps``;
    the pathwise gradient flows into the planner only (the critic is frozen
    for the evaluation). Returns ``(loss, log_probs.detach())`` so the
    temperature update can reuse the fresh samples.
    """
    loss, logp = _policy_objective(batch, nets, alpha, noise, generator)
    return loss, logp.detach()


def planner_step(batch, nets, alpha, optimizer, noise=None, generator=None,
                 entropy_target=None, servo_weight: float = 0.0):
    """One optimizer step on the planner; returns ``(loss, log_probs)``.

    With ``servo_weight > 0`` the step additionally minimizes
    ``servo_weight * (mean log k + entropy_target)^2``, a two-sided pull of
    the Monte-Carlo plan entropy onto the target. The temperature objective
    alone can only brake entropy from below (alpha >= 0); when the task
    gives the critic no leverage over plan noise, the entropy bonus's
    consistent gradient saturates the log-std head under an adaptive
    optimizer. The servo shares the update so the combined gradient is what
    the optimizer normalizes; the reparameterized log density depends only
    on the log-std path, so plan means are untouched. The returned loss
    value excludes the servo term.
    """
    optimizer.zero_grad()
    loss, logp = _policy_objective(batch, nets, alpha, noise, generator)
    total = loss
    if servo_weight > 0.0 and entropy_target is not None:
        total = total + servo_weight * (logp.mean() + entropy_target) ** 2
    total.backward()
    _check_grads("planner_step", nets.planner)
    optimizer.step()
    return float(loss.detach()), logp.detach()


def update_target(critic, target, tau: float):
    """Exact elementwise EMA ``target <- tau * critic + (1 - tau) * target``.

    Accepts two modules (updated in place) or two tensors (returns the new
    tensor).
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    if isinstance(critic, torch.Tensor):
        return tau * critic + (1.0 - tau) * target
    with torch.no_grad():
        critic_params = dict(critic.named_parameters())
        target_params = dict(target.named_parameters())
        if critic_params.keys() != target_params.keys():
            raise ValueError("critic and target parameter structures differ")
        for name, p in critic_params.items():
            tp = target_params[name]
            if tp.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}")
            tp.copy_(tau * p + (1.0 - tau) * tp)
    return target


def temperature_step(log_probs, temp: TemperatureState, optimizer) -> float:
    """One gradient step on ``J(alpha) = E[-alpha * (log k + H_target)]``.

    Raises alpha when entropy is below target and lowers it when above;
    returns the new alpha.
    """
    optimizer.zero_grad()
    loss = -(temp.log_alpha.exp() * (log_probs.detach() + temp.target_entropy)).mean()
    loss.backward()
    optimizer.step()
    return temp.alpha


def aux_step(batch, nets, aux_objective, optimizer) -> float:
    """One joint planner+actor step on a differentiable task objective."""
    optimizer.zero_grad()
    loss = aux_objective(batch, nets)
    _require_finite("aux_step", loss)
    loss.backward()
    _check_grads("aux_step", nets.planner)
    _check_grads("aux_step", nets.actor)
    optimizer.step()
    return float(loss.detach())


def critic_on_actor_losses(batch, nets, alpha, gamma, generator=None,
                           plan_noise=None, action_noise=None, with_log_prob=False):
    """Losses for the variant where the critic scores dense actions.

    Critic: ``0.5 (Q(s, a) - y)^2`` with
    ``y = r + gamma * (1 - done) * (Q_target(s', a') - alpha * log pi(a'|p'))``,
    ``p'``/``a'`` freshly sampled. Policy: ``alpha * log pi(a|p) - Q(s, a)``
    with reparameterized gradient paths through both planner and actor.
    ``with_log_prob=True`` appends the detached action log densities (for
    the temperature update).
    """
    if not nets.critic_on_actor:
        raise ValueError("networks were not built with critic_on_actor=True")
    q = nets.q_value(batch.states, batch.actions)
    with torch.no_grad():
        dist2, skips2 = nets.plan_distribution(batch.next_states)
        p2, _ = dist2.rsample(generator=generator)
        a2_mean, a2_log_std = nets.actor.action_distribution(p2, skips2)
        eps2 = torch.randn(a2_mean.shape, generator=generator, dtype=a2_mean.dtype)
        a2 = a2_mean + torch.exp(a2_log_std) * eps2
        logp_a2 = gaussian_log_prob(a2, a2_mean, a2_log_std)
        y = batch.rewards + gamma * (1.0 - batch.dones) * (
            nets.target_q(batch.next_states, a2) - alpha * logp_a2)
    _require_finite("critic_on_actor_losses", q, y)
    c_loss = 0.5 * (q - y).pow(2).mean()

    dist, skips = nets.plan_distribution(batch.states)
    if plan_noise is None:
        plan_noise = torch.randn(dist.mean.shape, generator=generator, dtype=dist.mean.dtype)
    plan, _ = sample_plan(dist, plan_noise)
    a_mean, a_log_std = nets.actor.action_distribution(plan, skips)
    if action_noise is None:
        action_noise = torch.randn(a_mean.shape, generator=generator, dtype=a_mean.dtype)
    action = a_mean + torch.exp(a_log_std) * action_noise
    logp_a = gaussian_log_prob(action, a_mean, a_log_std)
    with _frozen(nets.critic):
        q_pi = nets.q_value(batch.states, action)
    p_loss = (alpha * logp_a - q_pi).mean()
    if with_log_prob:
        return c_loss, p_loss, logp_a.detach()
    return c_loss, p_loss
