"""Versioned checkpoint container.

A checkpoint is a compressed named-array archive holding every network's
parameters, the temperature state, optimizer states, the env-step counter,
and the full config with its hash. Loading verifies the format version and
the stored config hash; a mismatch is an explicit error, never a silent
reinterpretation.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch

from .config import RunConfig, config_hash

__all__ = ["Checkpoint", "CheckpointError", "save_checkpoint", "load_checkpoint", "count_parameters"]

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    env_step: int
    params: dict  # net name -> {param name -> np.ndarray}
    log_alpha: float = 0.0
    optimizer_state: dict = field(default_factory=dict)  # opt name -> bytes
    format_version: int = FORMAT_VERSION

    @staticmethod
    def from_networks(cfg: RunConfig, nets, env_step: int = 0, log_alpha: float = 0.0,
                      optimizers: dict | None = None, discriminator=None) -> "Checkpoint":
        params = {}
        modules = {"planner": nets.planner, "actor": nets.actor,
                   "critic": nets.critic, "target_critic": nets.target_critic}
        for name, m in nets.extra.items():
            if isinstance(m, torch.nn.Module):
                modules[name] = m
        if discriminator is not None:
            modules["discriminator"] = discriminator
        for name, module in modules.items():
            params[name] = {k: v.detach().cpu().numpy().copy()
                            for k, v in module.state_dict().items()}
        opt_state = {}
        for name, opt in (optimizers or {}).items():
            buf = io.BytesIO()
            torch.save(opt.state_dict(), buf)
            opt_state[name] = buf.getvalue()
        return Checkpoint(config=cfg, env_step=env_step, params=params,
                          log_alpha=log_alpha, optimizer_state=opt_state)

    def load_into(self, nets, discriminator=None):
        """Copy stored parameters into a freshly built network bundle."""
        modules = {"planner": nets.planner, "actor": nets.actor,
                   "critic": nets.critic, "target_critic": nets.target_critic}
        for name, m in nets.extra.items():
            if isinstance(m, torch.nn.Module):
                modules[name] = m
        if discriminator is not None:
            modules["discriminator"] = discriminator
        for name, module in modules.items():
            if name not in self.params:
                raise CheckpointError(f"checkpoint is missing network {name!r}")
            state = {k: torch.as_tensor(v) for k, v in self.params[name].items()}
            module.load_state_dict(state)
        return nets


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    meta = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "config_hash": config_hash(ckpt.config),
        "env_step": ckpt.env_step,
        "log_alpha": ckpt.log_alpha,
        "networks": sorted(ckpt.params),
        "optimizers": sorted(ckpt.optimizer_state),
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for net, named in ckpt.params.items():
        for k, v in named.items():
            arrays[f"param/{net}/{k}"] = v
    for name, blob in ckpt.optimizer_state.items():
        arrays[f"opt/{name}"] = np.frombuffer(blob, dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path, expected_config: RunConfig | None = None) -> Checkpoint:
    try:
        with np.load(path) as archive:
            if "__meta__" not in archive.files:
                raise CheckpointError(f"{path}: not a checkpoint (missing metadata)")
            meta = json.loads(bytes(archive["__meta__"]).decode())
            arrays = {k: archive[k] for k in archive.files if k != "__meta__"}
    except (zipfile.BadZipFile, OSError, ValueError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    cfg = RunConfig.from_dict(meta["config"])
    if config_hash(cfg) != meta["config_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its hash")
    if expected_config is not None and config_hash(expected_config) != meta["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint config hash differs from the expected config")
    params: dict = {name: {} for name in meta["networks"]}
    opt_state = {}
    for key, value in arrays.items():
        if key.startswith("param/"):
            _, net, pname = key.split("/", 2)
            params[net][pname] = value
        elif key.startswith("opt/"):
            opt_state[key.split("/", 1)[1]] = value.tobytes()
    return Checkpoint(config=cfg, env_step=int(meta["env_step"]), params=params,
                      log_alpha=float(meta["log_alpha"]), optimizer_state=opt_state)


def count_parameters(ckpt: Checkpoint) -> dict:
    """Exact parameter counts per network plus policy/total aggregates.

    ``policy`` is the deployed planner+actor; ``total`` adds the critic(s)
    but not the EMA target copies or the discriminator.
    """
    counts = {name: int(sum(int(np.prod(a.shape)) for a in named.values()))
              for name, named in ckpt.params.items()}
    counts["policy"] = counts.get("planner", 0) + counts.get("actor", 0)
    counts["total"] = counts["policy"] + counts.get("critic", 0) + counts.get("critic2", 0)
    return counts
