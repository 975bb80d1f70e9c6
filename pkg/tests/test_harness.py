import dataclasses
import hashlib
import json

import numpy as np
import pytest
import torch

from planact.checkpoint import CheckpointError, count_parameters, load_checkpoint, save_checkpoint
from planact.config import RunConfig, config_hash, parse_config_text
from planact.harness import build_from_config, evaluate, train
from planact.merl import Batch


def tiny_cfg(task="digits", **over):
    base = dict(total_env_steps=40, warmup_steps=10, batch_size=8, pool_capacity=200,
                eval_pairs=2, horizon=3)
    base.update(over)
    return RunConfig.for_task(task, **base)


class TestConfig:
    def test_defaults_per_task(self):
        assert RunConfig.for_task("digits").horizon == 10
        assert RunConfig.for_task("registration").horizon == 20
        assert RunConfig.for_task("inpaint").horizon == 5

    def test_parse_sections_and_comments(self):
        cfg = parse_config_text("""
            # smoke config
            run.task = registration
            run.seed = 3
            rl.gamma = 0.95        # discount
            ablate.no_aux = true
            rl.target_entropy = auto
        """)
        assert cfg.task == "registration"
        assert cfg.seed == 3
        assert cfg.gamma == 0.95
        assert cfg.no_aux is True
        assert cfg.target_entropy is None

    def test_unknown_key_is_hard_error(self):
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config_text("run.task = digits\nrl.learning = 1\n")

    def test_duplicate_key_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            parse_config_text("run.seed = 1\nrun.seed = 2\n")

    def test_bad_boolean_rejected(self):
        with pytest.raises(ValueError):
            parse_config_text("ablate.no_rl = maybe\n")

    def test_hash_is_stable_and_sensitive(self):
        a = RunConfig.for_task("digits")
        b = RunConfig.for_task("digits")
        c = dataclasses.replace(a, seed=1)
        assert config_hash(a) == config_hash(b)
        assert config_hash(a) != config_hash(c)

    def test_gamma_bounds(self):
        with pytest.raises(ValueError):
            RunConfig.for_task("digits", gamma=1.5)


class TestCheckpoint:
    def test_round_trip_forward_pass_bitwise(self, tmp_path):
        cfg = tiny_cfg()
        result = train(dataclasses.replace(cfg, total_env_steps=0), tmp_path / "run")
        nets, _ = build_from_config(cfg)
        result.checkpoint.load_into(nets)
        state = torch.rand(2, 28, 28)
        dist, skips = nets.plan_distribution(state)
        out1 = nets.decode_action(dist.mean, skips)

        loaded = load_checkpoint(result.checkpoint_path)
        nets2, _ = build_from_config(cfg)
        loaded.load_into(nets2)
        dist2, skips2 = nets2.plan_distribution(state)
        out2 = nets2.decode_action(dist2.mean, skips2)
        assert torch.equal(out1, out2)
        assert torch.equal(dist.mean, dist2.mean)

    def test_corrupted_magic_bytes_rejected(self, tmp_path):
        cfg = tiny_cfg()
        result = train(dataclasses.replace(cfg, total_env_steps=0), tmp_path / "run")
        raw = bytearray(result.checkpoint_path.read_bytes())
        raw[:4] = b"\x00\x00\x00\x00"
        bad = tmp_path / "bad.npz"
        bad.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(bad)

    def test_cross_config_load_rejected(self, tmp_path):
        cfg = tiny_cfg()
        result = train(dataclasses.replace(cfg, total_env_steps=0), tmp_path / "run")
        other = RunConfig.for_task("registration")
        with pytest.raises(CheckpointError, match="hash"):
            load_checkpoint(result.checkpoint_path, expected_config=other)

    def test_version_mismatch_rejected(self, tmp_path):
        import planact.checkpoint as ck

        cfg = tiny_cfg()
        result = train(dataclasses.replace(cfg, total_env_steps=0), tmp_path / "run")
        original = ck.FORMAT_VERSION
        try:
            ck.FORMAT_VERSION = original + 1
            with pytest.raises(CheckpointError, match="version"):
                load_checkpoint(result.checkpoint_path)
        finally:
            ck.FORMAT_VERSION = original

    def test_count_parameters_single_conv_hand_value(self):
        from planact.checkpoint import Checkpoint

        ckpt = Checkpoint(config=tiny_cfg(), env_step=0, params={
            "planner": {"conv.weight": np.zeros((8, 1, 3, 3)), "conv.bias": np.zeros(8)},
            "actor": {},
            "critic": {},
        })
        counts = count_parameters(ckpt)
        assert counts["planner"] == 80  # 3*3*1*8 + 8
        assert counts["policy"] == 80
        assert counts["total"] == 80

    def test_zero_network_stub_counts_zero(self):
        from planact.checkpoint import Checkpoint

        ckpt = Checkpoint(config=tiny_cfg(), env_step=0,
                          params={"planner": {}, "actor": {}, "critic": {}})
        assert count_parameters(ckpt)["total"] == 0


class TestTrain:
    def test_zero_steps_emits_loadable_checkpoint(self, tmp_path):
        cfg = dataclasses.replace(tiny_cfg(), total_env_steps=0)
        result = train(cfg, tmp_path)
        table = evaluate(result.checkpoint_path, cfg.data_path, 2, n_pairs=2)
        assert len(table) == 2

    def test_untrained_warp_policy_keeps_dice_constant(self, tmp_path):
        # zero-init actor head -> identity warps -> flat per-step dice
        cfg = RunConfig.for_task("registration", total_env_steps=0, eval_pairs=2,
                                 image_size=32, horizon=4)
        result = train(cfg, tmp_path)
        table = evaluate(result.checkpoint, cfg.data_path, 4, n_pairs=3)
        dices = [row["dice"] for row in table]
        assert max(dices) - min(dices) < 1e-12

    def test_metrics_log_keys(self, tmp_path):
        cfg = tiny_cfg()
        result = train(cfg, tmp_path)
        lines = result.metrics_path.read_text().splitlines()
        assert len(lines) == cfg.total_env_steps
        record = json.loads(lines[-1])
        for key in ("step", "loss_q", "loss_pi", "loss_aux", "alpha", "reward", "metric"):
            assert key in record
        assert record["loss_q"] is not None  # past warm-up

    def test_seeded_runs_are_bit_identical(self, tmp_path):
        cfg = tiny_cfg(total_env_steps=60, warmup_steps=20)
        h = []
        for name in ("a", "b"):
            result = train(cfg, tmp_path / name)
            h.append(hashlib.sha256(result.metrics_path.read_bytes()).hexdigest())
        assert h[0] == h[1]

    def test_no_rl_never_touches_critic(self, tmp_path):
        cfg = tiny_cfg(no_rl=True)
        nets_ref, _ = build_from_config(cfg)
        before = {k: v.clone() for k, v in nets_ref.critic.state_dict().items()}
        result = train(cfg, tmp_path)
        after = result.checkpoint.params["critic"]
        for k, v in before.items():
            assert np.array_equal(v.numpy(), after[k])
        target_after = result.checkpoint.params["target_critic"]
        for k, v in before.items():
            assert np.array_equal(v.numpy(), target_after[k])
        record = json.loads(result.metrics_path.read_text().splitlines()[-1])
        assert record["loss_q"] is None and record["loss_aux"] is not None

    def test_no_aux_never_invokes_aux_ops(self, tmp_path, monkeypatch):
        calls = {"n": 0}
        import planact.harness as hz

        real = hz.registration_objective

        def spy(*a, **k):
            calls["n"] += 1
            return real(*a, **k)

        monkeypatch.setattr(hz, "registration_objective", spy)
        result = train(tiny_cfg(no_aux=True), tmp_path)
        assert calls["n"] == 0
        record = json.loads(result.metrics_path.read_text().splitlines()[-1])
        assert record["loss_aux"] is None and record["loss_q"] is not None

    def test_critic_on_actor_variant_trains(self, tmp_path):
        cfg = tiny_cfg(critic_on_actor=True)
        result = train(cfg, tmp_path)
        record = json.loads(result.metrics_path.read_text().splitlines()[-1])
        assert record["loss_q"] is not None and record["loss_pi"] is not None
        table = evaluate(result.checkpoint, cfg.data_path, 2, n_pairs=2)
        assert len(table) == 2

    def test_twin_q_flag_builds_and_trains(self, tmp_path):
        cfg = tiny_cfg(twin_q=True)
        result = train(cfg, tmp_path)
        assert "critic2" in result.checkpoint.params
        counts = count_parameters(result.checkpoint)
        assert counts["total"] > counts["policy"] + counts["critic2"] // 2

    def test_inpaint_with_discriminator_trains(self, tmp_path):
        cfg = tiny_cfg(task="inpaint")
        result = train(cfg, tmp_path)
        assert "discriminator" in result.checkpoint.params
        record = json.loads(result.metrics_path.read_text().splitlines()[-1])
        assert record["loss_aux"] is not None


class TestEvaluate:
    def test_prefix_property(self, tmp_path):
        cfg = tiny_cfg(total_env_steps=30, warmup_steps=10, horizon=4)
        result = train(cfg, tmp_path)
        short = evaluate(result.checkpoint, cfg.data_path, 1, n_pairs=3)
        long = evaluate(result.checkpoint, cfg.data_path, 4, n_pairs=3)
        for key in ("dice", "ssim", "psnr"):
            assert short[0][key] == long[0][key]

    def test_mean_plan_rollout_deterministic(self, tmp_path):
        cfg = tiny_cfg(total_env_steps=0)
        result = train(cfg, tmp_path)
        t1 = evaluate(result.checkpoint, cfg.data_path, 3, n_pairs=2)
        t2 = evaluate(result.checkpoint, cfg.data_path, 3, n_pairs=2)
        for r1, r2 in zip(t1, t2):
            assert all(r1[k] == r2[k] for k in r1 if k != "wall_clock")

    def test_artifacts_emitted(self, tmp_path):
        cfg = tiny_cfg(total_env_steps=0)
        result = train(cfg, tmp_path / "run")
        out = tmp_path / "eval"
        evaluate(result.checkpoint, cfg.data_path, 2, n_pairs=2, out_dir=out)
        assert (out / "eval_table.csv").exists()
        assert (out / "eval_curve.png").exists()
        assert (out / "eval_grid.png").exists()


class TestCli:
    def test_full_cycle(self, tmp_path, capsys):
        from planact.cli import main

        cfg_text = "\n".join([
            "run.task = digits",
            "run.total_env_steps = 25",
            "rl.warmup_steps = 10",
            "rl.batch_size = 8",
            "rl.pool_capacity = 100",
            "env.horizon = 3",
        ])
        cfg_path = tmp_path / "smoke.cfg"
        cfg_path.write_text(cfg_text)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg_path), "--out", str(out)]) == 0
        ckpt = out / "checkpoint.npz"
        assert ckpt.exists()
        assert main(["eval", "--checkpoint", str(ckpt), "--data", "builtin:digits",
                     "--steps", "2", "--pairs", "2", "--out", str(out)]) == 0
        assert main(["inspect", "--checkpoint", str(ckpt)]) == 0
        captured = capsys.readouterr()
        assert "policy" in captured.out

    def test_error_exits_nonzero(self, tmp_path, capsys):
        from planact.cli import main

        assert main(["inspect", "--checkpoint", str(tmp_path / "missing.npz")]) == 1
        assert "error" in capsys.readouterr().err
