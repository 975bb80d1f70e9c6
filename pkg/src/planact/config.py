"""Run configuration: typed defaults, a strict flat config-file parser,
and the canonical hash used to fingerprint checkpoints.

Config files are plain text, one ``section.key = value`` pair per line
(``#`` comments allowed). Every key has a default; unknown keys are hard
errors. ``run.task`` picks the per-task defaults (horizon, image size,
reward) before the remaining keys are applied.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

__all__ = ["RunConfig", "parse_config_file", "parse_config_text", "config_hash", "CONFIG_KEYS"]


@dataclass
class RunConfig:
    # run
    task: str = "digits"
    seed: int = 0
    total_env_steps: int = 20000
    eval_every: int = 0
    eval_pairs: int = 20
    # env
    horizon: int = 10
    image_size: int = 28
    image_channels: int = 1
    reward_metric: str = "dice"
    reward_mode: str = "improvement"
    reward_scale: float = 1.0
    pair_mode: str = "inner_class"
    reg_magnitude: float = 4.0
    reg_smoothness: float = 8.0
    mask_fraction: float = 0.5
    # rl
    gamma: float = 0.9
    tau: float = 0.005
    batch_size: int = 256
    pool_capacity: int = 100000
    warmup_steps: int = 1000
    lr_critic: float = 3e-4
    lr_planner: float = 3e-4
    lr_alpha: float = 3e-3
    alpha_init: float = 0.01
    target_entropy: float | None = None  # None -> -(plan dimensionality)
    entropy_servo_weight: float = 1.0
    optimizer: str = "adam"
    twin_q: bool = False
    # aux
    aux_lr: float = 1e-4
    weight_rec: float = 1.0
    weight_adv: float = 0.02
    weight_smooth: float = 1.0
    rec_norm: str = "l1"
    disc_lr: float = 1e-4
    # net
    base_width: int = 16
    plan_dim: int = 256
    # ablation flags
    no_rl: bool = False
    no_aux: bool = False
    critic_on_actor: bool = False
    # data
    data_path: str = "builtin:digits"

    def __post_init__(self):
        if self.task not in ("digits", "registration", "inpaint"):
            raise ValueError(f"unknown task {self.task!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must be in [0, 1]")
        if self.no_rl and self.critic_on_actor:
            raise ValueError("critic_on_actor has no effect with no_rl")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "RunConfig":
        return RunConfig(**d)

    @staticmethod
    def for_task(task: str, **overrides) -> "RunConfig":
        cfg = RunConfig(task=task, **{**_TASK_DEFAULTS[task], **overrides})
        return cfg


_TASK_DEFAULTS = {
    "digits": dict(horizon=10, image_size=28, reward_metric="dice", reward_scale=1.0,
                   data_path="builtin:digits"),
    "registration": dict(horizon=20, image_size=64, reward_metric="dice", reward_scale=1.0,
                         data_path="synth:registration"),
    "inpaint": dict(horizon=5, image_size=32, reward_metric="psnr", reward_scale=1.0 / 50.0,
                    data_path="synth:textures", rec_norm="l1"),
}

# file key -> dataclass field
CONFIG_KEYS = {
    "run.task": "task",
    "run.seed": "seed",
    "run.total_env_steps": "total_env_steps",
    "run.eval_every": "eval_every",
    "run.eval_pairs": "eval_pairs",
    "env.horizon": "horizon",
    "env.image_size": "image_size",
    "env.image_channels": "image_channels",
    "env.reward_metric": "reward_metric",
    "env.reward_mode": "reward_mode",
    "env.reward_scale": "reward_scale",
    "env.pair_mode": "pair_mode",
    "env.reg_magnitude": "reg_magnitude",
    "env.reg_smoothness": "reg_smoothness",
    "env.mask_fraction": "mask_fraction",
    "rl.gamma": "gamma",
    "rl.tau": "tau",
    "rl.batch_size": "batch_size",
    "rl.pool_capacity": "pool_capacity",
    "rl.warmup_steps": "warmup_steps",
    "rl.lr_critic": "lr_critic",
    "rl.lr_planner": "lr_planner",
    "rl.lr_alpha": "lr_alpha",
    "rl.alpha_init": "alpha_init",
    "rl.target_entropy": "target_entropy",
    "rl.entropy_servo_weight": "entropy_servo_weight",
    "rl.optimizer": "optimizer",
    "rl.twin_q": "twin_q",
    "aux.lr": "aux_lr",
    "aux.weight_rec": "weight_rec",
    "aux.weight_adv": "weight_adv",
    "aux.weight_smooth": "weight_smooth",
    "aux.rec_norm": "rec_norm",
    "aux.disc_lr": "disc_lr",
    "net.base_width": "base_width",
    "net.plan_dim": "plan_dim",
    "ablate.no_rl": "no_rl",
    "ablate.no_aux": "no_aux",
    "ablate.critic_on_actor": "critic_on_actor",
    "data.path": "data_path",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(field_name: str, raw: str):
    raw = raw.strip()
    ftype = _FIELD_TYPES[field_name]
    if field_name == "target_entropy":
        return None if raw.lower() in ("auto", "none") else float(raw)
    if ftype == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"{field_name}: expected a boolean, got {raw!r}")
    if ftype == "int":
        return int(raw)
    if ftype == "float":
        return float(raw)
    return raw


def parse_config_text(text: str) -> RunConfig:
    pairs = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in pairs:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = raw
    task = pairs.pop("run.task", "digits").strip()
    overrides = {CONFIG_KEYS[k]: _parse_value(CONFIG_KEYS[k], v) for k, v in pairs.items()}
    return RunConfig.for_task(task, **overrides)


def parse_config_file(path) -> RunConfig:
    return parse_config_text(Path(path).read_text())


def config_hash(cfg: RunConfig) -> str:
    canonical = json.dumps(cfg.to_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode()).hexdigest()
