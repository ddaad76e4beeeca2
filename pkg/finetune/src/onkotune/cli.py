"""Command-line front end: `onkotune train` and `onkotune manifest`."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .manifest import export_eval_manifest
from .train import FineTuneConfig, StabilityPolicy, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="onkotune", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a LoRA fine-tune on a chat JSONL dataset")
    p.add_argument("--dataset", required=True, help="chat-format JSONL")
    p.add_argument("--base-model", default="tiny")
    p.add_argument("--out", required=True)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--resume-from", help="checkpoint directory to continue from")
    for f in fields(FineTuneConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, type=type(f.default), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("manifest", help="export the per-epoch evaluation manifest")
    p.add_argument("--run-dir", required=True, help="training output directory")
    p.add_argument("--base-model", default="tiny")
    p.add_argument("--out", required=True, help="manifest JSON path")
    p.set_defaults(func=cmd_manifest)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        f.name: getattr(args, f.name)
        for f in fields(FineTuneConfig)
        if getattr(args, f.name) is not None
    }
    cfg = FineTuneConfig(**overrides)
    result = train(
        dataset=args.dataset,
        base_model=args.base_model,
        cfg=cfg,
        policy=StabilityPolicy(),
        out_dir=args.out,
        max_steps=args.max_steps,
        resume_from=args.resume_from,
    )
    print(
        f"trained {len(result.step_losses)} steps, loss {result.initial_loss:.3f} -> "
        f"{result.final_loss:.3f}, {len(result.checkpoint_dirs)} epoch checkpoints"
    )
    return 0


def cmd_manifest(args: argparse.Namespace) -> int:
    ckpt_root = Path(args.run_dir) / "checkpoints"
    dirs = sorted(
        (d for d in ckpt_root.iterdir() if d.name.startswith("epoch-")),
        key=lambda d: int(d.name.split("-")[1]),
    )
    manifest = export_eval_manifest(dirs, args.base_model, args.out)
    print(f"wrote manifest with {len(manifest['rows'])} rows to {args.out}")
    return 0


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single CLI boundary, includes TrainingDiverged
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
