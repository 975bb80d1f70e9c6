"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``ablate``, ``inspect``. The output
directory comes from ``--out``, falling back to the ``PLANACT_OUTDIR``
environment variable and then ``./planact_runs``. Exit status is 0 on
success and 1 with a message on stderr otherwise.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .checkpoint import count_parameters, load_checkpoint
from .config import parse_config_file
from .harness import ABLATION_VARIANTS, ablate, evaluate, train

__all__ = ["main"]


def _out_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    return Path(os.environ.get("PLANACT_OUTDIR", "planact_runs"))


def _cmd_train(args) -> int:
    cfg = parse_config_file(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.ablation:
        cfg = dataclasses.replace(cfg, **ABLATION_VARIANTS[args.ablation])
    result = train(cfg, _out_dir(args))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics:    {result.metrics_path}")
    return 0


def _cmd_eval(args) -> int:
    table = evaluate(args.checkpoint, args.data, args.steps, n_pairs=args.pairs,
                     out_dir=_out_dir(args), sampled_plans=args.sampled_plans)
    for row in table:
        print(json.dumps(row))
    return 0


def _cmd_ablate(args) -> int:
    cfg = parse_config_file(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = ablate(cfg, variants, args.seeds, _out_dir(args))
    width = max(len(r["variant"]) for r in rows)
    for row in rows:
        print(f"{row['variant']:<{width}}  {row['mean']:.4f} +/- {row['std']:.4f}")
    return 0


def _cmd_inspect(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    counts = count_parameters(ckpt)
    print(f"env_step: {ckpt.env_step}")
    print(f"log_alpha: {ckpt.log_alpha:.6f}")
    print("parameters:")
    for name in sorted(counts):
        print(f"  {name}: {counts[name]}")
    print("config:")
    for key, value in sorted(ckpt.config.to_dict().items()):
        print(f"  {key} = {value}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planact",
                                     description="step-wise image-to-image translation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the training loop from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--ablation", choices=sorted(ABLATION_VARIANTS), default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="step-wise evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--pairs", type=int, default=20)
    p.add_argument("--sampled-plans", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("ablate", help="run the ablation variant matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--variants", required=True,
                   help="comma-separated subset of " + ",".join(sorted(ABLATION_VARIANTS)))
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out", default=None)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("inspect", help="print parameter counts and config")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=_cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a clean message, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
