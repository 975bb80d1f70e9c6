import math

import numpy as np
import pytest
import torch
from scipy.integrate import quad

from planact.nets import (LOG_STD_MAX, LOG_STD_MIN, PlanDistribution, build_networks,
                          gaussian_log_prob, sample_plan)


def zero_weights(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()


class TestPlanDistribution:
    def test_zero_weight_planner_gives_standard_normal_params(self):
        nets = build_networks("digits", 28, seed=0)
        zero_weights(nets.planner)
        state = torch.zeros(2, 28, 28)
        dist, _ = nets.plan_distribution(state)
        assert torch.equal(dist.mean, torch.zeros(1, 7, 7))
        assert torch.equal(dist.log_std, torch.zeros(1, 7, 7))

    def test_digits_state_gives_7x7_plan(self):
        nets = build_networks("digits", 28, seed=1)
        dist, _ = nets.plan_distribution(torch.rand(2, 28, 28))
        assert dist.mean.shape == (1, 7, 7)

    def test_forward_determinism(self):
        nets = build_networks("digits", 28, seed=2)
        state = torch.rand(2, 28, 28)
        d1, s1 = nets.plan_distribution(state)
        d2, s2 = nets.plan_distribution(state)
        assert torch.equal(d1.mean, d2.mean)
        assert torch.equal(d1.log_std, d2.log_std)
        assert all(torch.equal(a, b) for a, b in zip(s1, s2))

    def test_log_std_clamped(self):
        d = PlanDistribution(torch.zeros(3), torch.tensor([-20.0, 0.0, 20.0]))
        assert float(d.log_std.min()) == LOG_STD_MIN
        assert float(d.log_std.max()) == LOG_STD_MAX

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            PlanDistribution(torch.zeros(3), torch.zeros(4))


class TestSamplePlan:
    def test_zero_noise_returns_mean(self):
        d = PlanDistribution(torch.randn(1, 7, 7), torch.randn(1, 7, 7) * 0.1)
        plan, _ = sample_plan(d, torch.zeros(1, 7, 7))
        assert torch.allclose(plan, d.mean)

    def test_single_element_log_density_closed_form(self):
        # standard normal at x = 1: -0.5 * (1 + ln 2 pi)
        d = PlanDistribution(torch.zeros(1, dtype=torch.float64),
                             torch.zeros(1, dtype=torch.float64))
        plan, logp = sample_plan(d, torch.ones(1, dtype=torch.float64))
        assert float(plan) == 1.0
        expected = -0.5 * (1.0 + math.log(2.0 * math.pi))
        assert float(logp) == pytest.approx(expected, abs=1e-9)
        assert expected == pytest.approx(-1.41894, abs=5e-6)

    def test_monte_carlo_entropy_matches_analytic(self):
        # 49-dim standard Gaussian: H = 49/2 * (1 + ln 2 pi) ~ 69.53
        gen = torch.Generator().manual_seed(0)
        d = PlanDistribution(torch.zeros(100000, 1, 7, 7), torch.zeros(100000, 1, 7, 7))
        noise = torch.randn(d.mean.shape, generator=gen)
        _, logp = sample_plan(d, noise)
        estimate = float(-logp.mean())
        analytic = 49 * 0.5 * (1 + math.log(2 * math.pi))
        assert analytic == pytest.approx(69.53, abs=5e-3)
        assert abs(estimate - analytic) / analytic < 0.01

    def test_density_integrates_to_one(self):
        # single-element plan, quadrature over +/- 8 sigma
        mean, log_std = 0.3, -0.4
        d = PlanDistribution(torch.tensor([mean]), torch.tensor([log_std]))

        def pdf(x):
            return math.exp(float(d.log_prob(torch.tensor([x]))))

        sigma = math.exp(log_std)
        integral, _ = quad(pdf, mean - 8 * sigma, mean + 8 * sigma, limit=200)
        assert integral == pytest.approx(1.0, abs=1e-6)

    def test_noise_shape_mismatch_rejected(self):
        d = PlanDistribution(torch.zeros(1, 7, 7), torch.zeros(1, 7, 7))
        with pytest.raises(ValueError):
            sample_plan(d, torch.zeros(1, 6, 6))

    def test_batched_log_prob_reduces_per_sample(self):
        d = PlanDistribution(torch.zeros(5, 1, 7, 7), torch.zeros(5, 1, 7, 7))
        _, logp = sample_plan(d, torch.randn(5, 1, 7, 7))
        assert logp.shape == (5,)


class TestDecodeAction:
    def test_digits_plan_decodes_to_field(self):
        nets = build_networks("digits", 28, seed=3)
        dist, skips = nets.plan_distribution(torch.rand(2, 28, 28))
        action = nets.decode_action(dist.mean, skips)
        assert action.shape == (2, 28, 28)

    def test_zero_weight_actor_outputs_identity_warp(self):
        nets = build_networks("digits", 28, seed=4)
        zero_weights(nets.actor)
        dist, skips = nets.plan_distribution(torch.rand(2, 28, 28))
        action = nets.decode_action(dist.mean, skips)
        assert torch.equal(action, torch.zeros(2, 28, 28))

    def test_fresh_networks_start_at_identity_warp(self):
        # final actor layer is zero-initialized for warping tasks
        nets = build_networks("registration", 64, seed=5)
        dist, skips = nets.plan_distribution(torch.rand(2, 64, 64))
        action = nets.decode_action(dist.rsample(generator=torch.Generator().manual_seed(0))[0], skips)
        assert torch.equal(action, torch.zeros(2, 64, 64))

    def test_determinism(self):
        nets = build_networks("digits", 28, seed=6)
        dist, skips = nets.plan_distribution(torch.rand(2, 28, 28))
        a1 = nets.decode_action(dist.mean, skips)
        a2 = nets.decode_action(dist.mean, skips)
        assert torch.equal(a1, a2)

    def test_missing_skips_rejected(self):
        nets = build_networks("digits", 28, seed=7)
        with pytest.raises(ValueError):
            nets.decode_action(torch.zeros(1, 7, 7), None)
        with pytest.raises(ValueError):
            nets.decode_action(torch.zeros(1, 7, 7), [torch.zeros(16, 28, 28)])

    def test_inpaint_action_bounded(self):
        nets = build_networks("inpaint", 32, in_channels=1, action_channels=1, seed=8)
        dist, skips = nets.plan_distribution(torch.rand(1, 32, 32))
        img = nets.decode_action(dist.mean, skips)
        assert img.shape == (1, 32, 32)
        assert float(img.min()) >= 0.0 and float(img.max()) <= 1.0


class TestQValue:
    def test_zero_weight_critic_outputs_zero(self):
        nets = build_networks("digits", 28, seed=9)
        zero_weights(nets.critic)
        q = nets.q_value(torch.rand(2, 28, 28), torch.rand(1, 7, 7))
        assert float(q) == 0.0

    def test_target_equals_critic_after_hard_copy(self):
        nets = build_networks("digits", 28, seed=10)
        s, p = torch.rand(2, 28, 28), torch.rand(1, 7, 7)
        assert float(nets.q_value(s, p)) == float(nets.target_q(s, p))

    def test_tiny_linear_critic_hand_value(self):
        class OneUnit(torch.nn.Module):
            def __init__(self):
                super().__init__()
                self.w = torch.nn.Parameter(torch.tensor([2.0, -1.0]))
                self.b = torch.nn.Parameter(torch.tensor(0.5))

            def forward(self, state, plan):
                return state @ self.w[:1] + plan @ self.w[1:] + self.b

        critic = OneUnit()
        q = critic(torch.tensor([[3.0]]), torch.tensor([[4.0]]))
        assert float(q) == pytest.approx(2.0 * 3.0 - 1.0 * 4.0 + 0.5, abs=1e-12)


class TestPlanActionDimensions:
    @pytest.mark.parametrize("task,size,in_c,act_c", [
        ("digits", 28, 2, 2),
        ("registration", 64, 2, 2),
        ("inpaint", 32, 1, 1),
    ])
    def test_plan_strictly_smaller_than_action(self, task, size, in_c, act_c):
        nets = build_networks(task, size, in_channels=in_c, action_channels=act_c, seed=0)
        plan_dim = int(np.prod(nets.plan_shape))
        action_dim = int(np.prod(nets.action_shape))
        assert plan_dim < action_dim


class TestGaussianLogProb:
    def test_matches_scipy(self):
        from scipy.stats import norm

        x = torch.tensor([0.3, -1.2])
        mean = torch.tensor([0.1, 0.0])
        log_std = torch.tensor([-0.5, 0.2])
        ours = float(gaussian_log_prob(x, mean, log_std))
        ref = norm.logpdf(x.numpy(), loc=mean.numpy(), scale=np.exp(log_std.numpy())).sum()
        assert ours == pytest.approx(float(ref), abs=1e-6)
