"""Training, evaluation, and ablation harness.

``train`` runs the interleaved loop: one environment step, then one
gradient step each for the critic, the planner, and the auxiliary
objective, followed by the target EMA and the temperature update. Runs are
single-threaded and bit-reproducible given (config, seed). ``evaluate``
rolls a checkpoint out deterministically (plan = distribution mean) and
emits per-step metric tables, curves, and image grids; ``ablate`` runs the
variant matrix over seeds.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import DigitsDataset, load_dataset
from .envs import (DigitsEnv, EpisodePair, InpaintEnv, RegistrationEnv, _textured_image,
                   make_digits_pair, make_synth_reg_pair)
from .losses import Discriminator, adversarial_losses, combined_aux, reconstruction_loss, registration_objective
from .merl import (NonFiniteLossError, ReplayPool, TemperatureState, Transition, aux_step,
                   critic_on_actor_losses, critic_step, make_optimizer,
                   planner_step, temperature_step, update_target)
from .metrics import RewardConfig, psnr, ssim
from .nets import build_networks
from .warp import compose_fields, jacobian_stats

__all__ = ["train", "evaluate", "ablate", "TrainResult", "TrainingAborted",
           "build_from_config", "make_env", "make_pair_source", "ABLATION_VARIANTS"]

ABLATION_VARIANTS = {
    "full": {},
    "no_rl": {"no_rl": True},
    "no_aux": {"no_aux": True},
    "critic_on_actor": {"critic_on_actor": True},
}


class TrainingAborted(RuntimeError):
    """A non-finite loss/gradient stopped the run; a checkpoint was saved."""


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    checkpoint_path: Path
    metrics_path: Path


# ---------------------------------------------------------------------------
# construction helpers


def build_from_config(cfg: RunConfig):
    """Networks (+ optional twin critic and discriminator) for a config."""
    in_channels = 2 if cfg.task in ("digits", "registration") else cfg.image_channels
    action_channels = 2 if cfg.task in ("digits", "registration") else cfg.image_channels
    nets = build_networks(cfg.task, cfg.image_size, in_channels=in_channels,
                          base_width=cfg.base_width, plan_dim=cfg.plan_dim,
                          action_channels=action_channels, seed=cfg.seed,
                          critic_on_actor=cfg.critic_on_actor)
    if cfg.twin_q:
        twin = build_networks(cfg.task, cfg.image_size, in_channels=in_channels,
                              base_width=cfg.base_width, plan_dim=cfg.plan_dim,
                              action_channels=action_channels, seed=cfg.seed + 7919,
                              critic_on_actor=cfg.critic_on_actor)
        nets.extra["critic2"] = twin.critic
        nets.extra["target_critic2"] = twin.target_critic
    disc = None
    if cfg.task == "inpaint" and cfg.weight_adv > 0 and not cfg.no_aux:
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed + 31)
            disc = Discriminator(cfg.image_channels, cfg.image_size)
    return nets, disc


def make_env(cfg: RunConfig):
    reward = RewardConfig(cfg.reward_metric, cfg.reward_mode, cfg.reward_scale)
    if cfg.task == "digits":
        return DigitsEnv(cfg.horizon, reward)
    if cfg.task == "registration":
        return RegistrationEnv(cfg.horizon, reward)
    return InpaintEnv(cfg.horizon, reward, cfg.mask_fraction)


def make_pair_source(cfg: RunConfig, rng: np.random.Generator, split: str = "train",
                     dataset=None):
    """Callable producing EpisodePairs for the config's task and data path."""
    if cfg.task == "digits":
        ds = dataset if dataset is not None else load_dataset(cfg.data_path)
        part = ds.train if split == "train" else ds.test
        if len(part) == 0:
            raise ValueError(f"dataset split {split!r} is empty")
        return lambda: make_digits_pair(part, cfg.pair_mode, rng)
    if cfg.task == "registration":
        if isinstance(dataset, DigitsDataset) or (dataset is None and not cfg.data_path.startswith("synth")):
            ds = dataset if dataset is not None else load_dataset(cfg.data_path)
            part = ds.train if split == "train" else ds.test

            def folder_pair():
                i, j = rng.choice(len(part), size=2, replace=False)
                return EpisodePair(moving=part.images[i], fixed=part.images[j])

            return folder_pair
        return lambda: make_synth_reg_pair(rng, cfg.reg_smoothness, cfg.reg_magnitude,
                                           cfg.image_size)
    if cfg.data_path.startswith("synth") and dataset is None:
        return lambda: EpisodePair(ground_truth=_textured_image(rng, cfg.image_size)[None])
    ds = dataset if dataset is not None else load_dataset(cfg.data_path)
    part = ds.train if split == "train" else ds.test

    def image_pair():
        i = rng.integers(len(part))
        return EpisodePair(ground_truth=part.images[i][None])

    return image_pair


def _plan_dim(nets) -> int:
    return int(np.prod(nets.plan_shape))


def _frozen_params(*modules):
    from .merl import _frozen

    return _frozen(*modules)


def make_aux_objective(cfg: RunConfig, gen: torch.Generator, disc=None, disc_opt=None):
    """The task's differentiable auxiliary objective over a replay batch."""
    if cfg.task in ("digits", "registration"):

        def warp_objective(batch, nets):
            dist, skips = nets.plan_distribution(batch.states)
            plan, _ = dist.rsample(generator=gen)
            action = nets.decode_action(plan, skips)
            omega = compose_fields(action, batch.extras["omega_prev"])
            fixed = batch.states[:, 1:2]
            moving = batch.extras["moving"].unsqueeze(1)
            return registration_objective(fixed, moving, omega, cfg.weight_smooth)

        return warp_objective

    def inpaint_objective(batch, nets):
        dist, skips = nets.plan_distribution(batch.states)
        plan, _ = dist.rsample(generator=gen)
        pred = nets.decode_action(plan, skips)
        truth = batch.extras["truth"]
        mask = batch.extras["mask"]
        composite = truth * (1.0 - mask) + pred * mask
        rec = reconstruction_loss(composite, truth, cfg.rec_norm)
        if disc is None:
            return cfg.weight_rec * rec
        d_real = disc(truth)
        disc_opt.zero_grad()
        d_loss, _ = adversarial_losses(d_real, disc(composite.detach()))
        d_loss.backward()
        disc_opt.step()
        with _frozen_params(disc):
            _, g_loss = adversarial_losses(d_real.detach(), disc(composite))
        return combined_aux(rec, g_loss, cfg.weight_rec, cfg.weight_adv)

    return inpaint_objective


def _env_extras(cfg, env) -> dict:
    if cfg.task in ("digits", "registration"):
        return {"moving": env.moving.copy(), "omega_prev": env.omega.copy()}
    return {"truth": env.truth.copy(), "mask": env.mask.copy()}


# ---------------------------------------------------------------------------
# training


def train(cfg: RunConfig, out_dir) -> TrainResult:
    """Run the interleaved environment/gradient loop and save a checkpoint.

    Honors the ablation flags: ``no_rl`` skips every critic/planner/
    temperature/target update (auxiliary learning only), ``no_aux`` skips
    the auxiliary step, ``critic_on_actor`` switches to the action-critic
    losses. A non-finite loss saves ``abort.npz`` and raises
    ``TrainingAborted``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    rng_pairs = np.random.default_rng([cfg.seed, 1])
    nets, disc = build_from_config(cfg)
    env = make_env(cfg)
    source = make_pair_source(cfg, rng_pairs)
    pool = ReplayPool(cfg.pool_capacity, seed=cfg.seed + 1)

    critic_params = list(nets.critic.parameters())
    if cfg.twin_q:
        critic_params += list(nets.extra["critic2"].parameters())
    opt_critic = make_optimizer(critic_params, cfg.lr_critic, cfg.optimizer)
    policy_params = list(nets.planner.parameters())
    if cfg.critic_on_actor:
        policy_params += list(nets.actor.parameters())
    opt_planner = make_optimizer(policy_params, cfg.lr_planner, cfg.optimizer)
    opt_aux = make_optimizer(list(nets.planner.parameters()) + list(nets.actor.parameters()),
                             cfg.aux_lr, cfg.optimizer)
    disc_opt = make_optimizer(disc.parameters(), cfg.disc_lr, cfg.optimizer) if disc else None
    target_entropy = cfg.target_entropy if cfg.target_entropy is not None else -float(_plan_dim(nets))
    temp = TemperatureState.create(cfg.alpha_init, target_entropy)
    opt_temp = make_optimizer([temp.log_alpha], cfg.lr_alpha, cfg.optimizer)
    aux_objective = make_aux_objective(cfg, gen, disc, disc_opt)

    eval_rng = np.random.default_rng([cfg.seed, 2])
    eval_pairs = None
    if cfg.eval_every > 0:
        eval_source = make_pair_source(cfg, eval_rng)
        eval_pairs = [eval_source() for _ in range(min(cfg.eval_pairs, 8))]

    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "checkpoint.npz"
    metric_key = cfg.reward_metric if cfg.task != "inpaint" else "psnr"

    def snapshot(step):
        opts = {"critic": opt_critic, "planner": opt_planner, "aux": opt_aux, "temp": opt_temp}
        if disc_opt:
            opts["disc"] = disc_opt
        return Checkpoint.from_networks(cfg, nets, env_step=step,
                                        log_alpha=float(temp.log_alpha.detach()),
                                        optimizers=opts, discriminator=disc)

    state = env.reset(source())
    log = metrics_path.open("w")
    try:
        for step in range(1, cfg.total_env_steps + 1):
            s_t = torch.as_tensor(state.channels)
            with torch.no_grad():
                dist, skips = nets.plan_distribution(s_t)
                if step <= cfg.warmup_steps:
                    plan = torch.randn(nets.plan_shape, generator=gen)
                else:
                    plan, _ = dist.rsample(generator=gen)
                if cfg.critic_on_actor:
                    a_mean, a_log_std = nets.actor.action_distribution(plan, skips)
                    eps = torch.randn(a_mean.shape, generator=gen)
                    action = a_mean + torch.exp(a_log_std) * eps
                else:
                    action = nets.decode_action(plan, skips)
            extras = _env_extras(cfg, env)
            env_step = env.step(action.numpy())
            pool.push(Transition(state.channels, plan.numpy(), action.numpy(),
                                 env_step.reward, env_step.next_state.channels,
                                 env_step.done, extras))
            record = {"step": step, "loss_q": None, "loss_pi": None, "loss_aux": None,
                      "alpha": None, "reward": env_step.reward,
                      "metric": env_step.info.get(metric_key), "entropy": None}
            try:
                if step > cfg.warmup_steps and len(pool) >= cfg.batch_size:
                    batch = pool.sample(cfg.batch_size)
                    if not cfg.no_rl:
                        if cfg.critic_on_actor:
                            c_loss, p_loss, logp = critic_on_actor_losses(
                                batch, nets, temp.alpha, cfg.gamma, generator=gen,
                                with_log_prob=True)
                            # both backwards run before either step so the
                            # critic update cannot invalidate saved tensors
                            opt_critic.zero_grad()
                            opt_planner.zero_grad()
                            c_loss.backward()
                            p_loss.backward()
                            opt_critic.step()
                            opt_planner.step()
                            record["loss_q"] = float(c_loss.detach())
                            record["loss_pi"] = float(p_loss.detach())
                        else:
                            record["loss_q"] = critic_step(batch, nets, temp.alpha,
                                                           cfg.gamma, opt_critic, generator=gen)
                            loss_pi, logp = planner_step(
                                batch, nets, temp.alpha, opt_planner, generator=gen,
                                entropy_target=target_entropy,
                                servo_weight=cfg.entropy_servo_weight)
                            record["loss_pi"] = loss_pi
                        record["alpha"] = temperature_step(logp, temp, opt_temp)
                        record["entropy"] = float(-logp.mean())
                        update_target(nets.critic, nets.target_critic, cfg.tau)
                        if cfg.twin_q:
                            update_target(nets.extra["critic2"],
                                          nets.extra["target_critic2"], cfg.tau)
                    if not cfg.no_aux:
                        record["loss_aux"] = aux_step(batch, nets, aux_objective, opt_aux)
            except NonFiniteLossError as exc:
                save_checkpoint(snapshot(step), out_dir / "abort.npz")
                raise TrainingAborted(f"aborted at env step {step}: {exc}") from exc

            if eval_pairs and step % cfg.eval_every == 0:
                record["eval_metric"] = _quick_eval(cfg, nets, eval_pairs, metric_key)
            log.write(json.dumps(record) + "\n")
            state = env.reset(source()) if env_step.done else env_step.next_state
    finally:
        log.close()

    ckpt = snapshot(cfg.total_env_steps)
    save_checkpoint(ckpt, ckpt_path)
    _plot_training_curves(metrics_path, out_dir / "train_curves.png")
    return TrainResult(checkpoint=ckpt, checkpoint_path=ckpt_path, metrics_path=metrics_path)


def _quick_eval(cfg, nets, pairs, metric_key) -> float:
    env = make_env(cfg)
    finals = []
    with torch.no_grad():
        for pair in pairs:
            state = env.reset(pair)
            for _ in range(cfg.horizon):
                es = env.step(_deterministic_action(nets, state, cfg).numpy())
                state = es.next_state
            finals.append(env.last_info[metric_key])
    return float(np.mean(finals))


def _deterministic_action(nets, state, cfg):
    dist, skips = nets.plan_distribution(torch.as_tensor(state.channels))
    plan = dist.mode()
    if cfg.critic_on_actor:
        return nets.actor.action_distribution(plan, skips)[0]
    return nets.decode_action(plan, skips)


# ---------------------------------------------------------------------------
# evaluation


def _resolve_eval_pairs(cfg: RunConfig, data, n_pairs: int, seed: int):
    rng = np.random.default_rng([seed, 3])
    if isinstance(data, (list, tuple)):
        return list(data)[:n_pairs]
    if isinstance(data, DigitsDataset):
        if cfg.task == "inpaint":
            part = data.test if len(data.test) else data.train
            idx = rng.choice(len(part), size=n_pairs)
            return [EpisodePair(ground_truth=part.images[i][None]) for i in idx]
        if cfg.task == "registration":
            part = data.test if len(data.test) else data.train
            out = []
            for _ in range(n_pairs):
                i, j = rng.choice(len(part), size=2, replace=False)
                out.append(EpisodePair(moving=part.images[i], fixed=part.images[j]))
            return out
        source = make_pair_source(cfg, rng, split="test", dataset=data)
        return [source() for _ in range(n_pairs)]
    if isinstance(data, str):
        if cfg.task == "digits" and not data.startswith("synth"):
            return _resolve_eval_pairs(cfg, load_dataset(data), n_pairs, seed)
        if cfg.task == "registration" and data.startswith("synth"):
            return [make_synth_reg_pair(rng, cfg.reg_smoothness, cfg.reg_magnitude,
                                        cfg.image_size) for _ in range(n_pairs)]
        if cfg.task == "inpaint" and data.startswith("synth"):
            return [EpisodePair(ground_truth=_textured_image(rng, cfg.image_size)[None])
                    for _ in range(n_pairs)]
        return _resolve_eval_pairs(cfg, load_dataset(data), n_pairs, seed)
    raise ValueError(f"cannot build {cfg.task} evaluation pairs from {data!r}")


def evaluate(checkpoint, data, max_steps: int, n_pairs: int = 20, out_dir=None,
             sampled_plans: bool = False, seed: int = 0):
    """Deterministic step-wise rollout; returns one aggregated row per step.

    ``checkpoint`` is a Checkpoint or a path to one; ``data`` is a dataset
    object, a dataset spec string, or a list of EpisodePairs matching the
    checkpoint's task. Rows carry the task metrics, Jacobian statistics for
    warping tasks, and mean wall-clock per step.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint)
    cfg = checkpoint.config
    torch.set_num_threads(1)
    nets, disc = build_from_config(cfg)
    checkpoint.load_into(nets, discriminator=disc)
    pairs = _resolve_eval_pairs(cfg, data, n_pairs, seed)
    metric_key = cfg.reward_metric if cfg.task != "inpaint" else "psnr"
    gen = torch.Generator().manual_seed(seed)

    per_step = [[] for _ in range(max_steps)]
    grids = []
    with torch.no_grad():
        for pair in pairs:
            env = make_env(cfg)
            state = env.reset(pair)
            panel = [state.channels[0].copy()]
            for t in range(max_steps):
                tic = time.perf_counter()
                dist, skips = nets.plan_distribution(torch.as_tensor(state.channels))
                plan = dist.rsample(generator=gen)[0] if sampled_plans else dist.mode()
                if cfg.critic_on_actor:
                    action = nets.actor.action_distribution(plan, skips)[0]
                else:
                    action = nets.decode_action(plan, skips)
                es = env.step(action.numpy())
                wall = time.perf_counter() - tic
                row = {"wall_clock": wall, metric_key: es.info[metric_key]}
                if cfg.task in ("digits", "registration"):
                    moving_now, fixed = es.next_state.channels[0], es.next_state.channels[1]
                    row.setdefault("ssim", ssim(moving_now, fixed))
                    row.setdefault("psnr", psnr(moving_now, fixed))
                    js = jacobian_stats(env.omega)
                    row.update(jac_mean_det=js.mean_det, jac_std_det=js.std_det,
                               jac_neg_frac=js.negative_fraction)
                else:
                    row.setdefault("ssim", ssim(es.next_state.channels[0], env.truth[0]))
                per_step[t].append(row)
                state = es.next_state
                panel.append(state.channels[0].copy())
            grids.append(panel)

    table = []
    for t, rows in enumerate(per_step, start=1):
        agg = {"step": t}
        for key in rows[0]:
            agg[key] = float(np.mean([r[key] for r in rows]))
        table.append(agg)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_table(table, out_dir / "eval_table.csv")
        _plot_eval_curve(table, metric_key, out_dir / "eval_curve.png")
        _plot_grid(grids[:6], out_dir / "eval_grid.png")
    return table


def ablate(base_cfg: RunConfig, variants, seeds: int, out_dir) -> list[dict]:
    """Train/evaluate each ablation variant over ``seeds`` seeds.

    Returns one row per variant with the mean and std of the final-step
    metric, laid out like a comparison table.
    """
    out_dir = Path(out_dir)
    unknown = set(variants) - set(ABLATION_VARIANTS)
    if unknown:
        raise ValueError(f"unknown ablation variants: {sorted(unknown)}")
    rows = []
    for variant in variants:
        finals = []
        for s in range(seeds):
            cfg = dataclasses.replace(base_cfg, seed=base_cfg.seed + s,
                                      **ABLATION_VARIANTS[variant])
            run_dir = out_dir / variant / f"seed{cfg.seed}"
            result = train(cfg, run_dir)
            table = evaluate(result.checkpoint, cfg.data_path, cfg.horizon,
                             n_pairs=cfg.eval_pairs, seed=base_cfg.seed)
            metric_key = cfg.reward_metric if cfg.task != "inpaint" else "psnr"
            finals.append(table[-1][metric_key])
        rows.append({"variant": variant, "mean": float(np.mean(finals)),
                     "std": float(np.std(finals)), "values": [float(v) for v in finals]})
    _write_table([{k: (json.dumps(v) if isinstance(v, list) else v) for k, v in r.items()}
                  for r in rows], out_dir / "ablation_table.csv")
    return rows


# ---------------------------------------------------------------------------
# artifact emission


def _write_table(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _plot_eval_curve(table, metric_key, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [r["step"] for r in table]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(steps, [r[metric_key] for r in table], marker="o", label=metric_key)
    if "ssim" in table[0] and metric_key != "ssim":
        ax.plot(steps, [r["ssim"] for r in table], marker="s", label="ssim")
    ax.set_xlabel("step")
    ax.set_ylabel("metric")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_grid(panels, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if not panels:
        return
    n_rows = len(panels)
    n_cols = len(panels[0])
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(1.2 * n_cols, 1.2 * n_rows))
    axes = np.atleast_2d(axes)
    for r, panel in enumerate(panels):
        for c, img in enumerate(panel):
            ax = axes[r, c]
            ax.imshow(img, cmap="gray", vmin=0, vmax=1)
            ax.set_axis_off()
            if r == 0:
                ax.set_title("init" if c == 0 else f"t={c}", fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _plot_training_curves(metrics_path, out_path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = [json.loads(line) for line in Path(metrics_path).read_text().splitlines()]
    if not records:
        return
    steps = [r["step"] for r in records]
    fig, axes = plt.subplots(2, 2, figsize=(9, 6))
    axes[0, 0].plot(steps, [r["reward"] for r in records], lw=0.4)
    axes[0, 0].set_title("reward")
    axes[0, 1].plot(steps, [r["metric"] for r in records], lw=0.4)
    axes[0, 1].set_title("env metric")
    axes[1, 0].plot(steps, [r["alpha"] if r["alpha"] is not None else np.nan for r in records], lw=0.6)
    axes[1, 0].set_title("alpha")
    axes[1, 0].set_yscale("log")
    axes[1, 1].plot(steps, [r["loss_aux"] if r["loss_aux"] is not None else np.nan for r in records], lw=0.4)
    axes[1, 1].set_title("aux loss")
    for ax in axes.flat:
        ax.set_xlabel("env step")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
