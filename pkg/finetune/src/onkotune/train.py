"""LoRA training loop with per-epoch checkpoints and NaN-gradient recovery.

Recovery policy: when a non-finite gradient (or loss) is detected, training is
rolled back to the last valid checkpoint (the initial snapshot if no epoch has
completed yet), the fallback learning rate is applied and gradient-norm
clipping is switched on, then training continues. A second instability after
the fallback is treated as irrecoverable. Every run writes a step-indexed loss
CSV whose header records the training-stack choices, plus an events JSONL.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import torch
from torch import nn

from .data import VOCAB_SIZE, batches, load_chat_jsonl
from .lora import apply_lora, count_parameters, trainable_parameters
from .model import build_base_model

log = logging.getLogger(__name__)

QUANTIZATION_MODES = ("none", "8bit", "4bit")


class TrainingDiverged(Exception):
    """Instability persisted after the fallback settings were applied."""


@dataclass(frozen=True, slots=True)
class FineTuneConfig:
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.1
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    per_device_batch: int = 6
    epochs: int = 5
    quantization: str = "none"
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if self.quantization not in QUANTIZATION_MODES:
            raise ValueError(
                f"quantization must be one of {QUANTIZATION_MODES}, got {self.quantization!r}"
            )


@dataclass(frozen=True, slots=True)
class StabilityPolicy:
    nan_gradient_detection: bool = True
    resume_from_last_valid_checkpoint: bool = True
    fallback_learning_rate: float = 1e-5
    max_gradient_norm: float = 1.0


@dataclass
class TrainResult:
    checkpoint_dirs: list[Path]
    loss_log: Path
    events_log: Path
    events: list[dict]
    step_losses: list[float]
    initial_loss: float
    final_loss: float


def _save_checkpoint(
    directory: Path,
    model: nn.Module,
    optimizer: torch.optim.Optimizer,
    epoch: int,
    global_step: int,
    fallback_active: bool,
    base_model: str,
    cfg: FineTuneConfig,
) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "epoch": epoch,
            "global_step": global_step,
            "fallback_active": fallback_active,
        },
        directory / "checkpoint.pt",
    )
    (directory / "meta.json").write_text(
        json.dumps(
            {
                "epoch": epoch,
                "global_step": global_step,
                "fallback_active": fallback_active,
                "base_model": base_model,
                "config": asdict(cfg),
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )


def _load_checkpoint(
    directory: Path, model: nn.Module, optimizer: torch.optim.Optimizer
) -> dict:
    state = torch.load(Path(directory) / "checkpoint.pt", weights_only=False)
    model.load_state_dict(state["model"])
    optimizer.load_state_dict(state["optimizer"])
    torch.set_rng_state(state["torch_rng"])
    return state


def _grad_norm(params: Sequence[nn.Parameter]) -> float:
    norms = [p.grad.detach().norm() for p in params if p.grad is not None]
    if not norms:
        return 0.0
    return float(torch.norm(torch.stack(norms)))


def _set_lr(optimizer: torch.optim.Optimizer, lr: float) -> None:
    for group in optimizer.param_groups:
        group["lr"] = lr


def train(
    dataset: str | Path,
    base_model: str,
    cfg: FineTuneConfig | None = None,
    policy: StabilityPolicy | None = None,
    out_dir: str | Path = "finetune-run",
    max_steps: int | None = None,
    nan_injection_step: int | Sequence[int] | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the fine-tune, writing checkpoints/epoch-N, loss.csv and events.jsonl.

    `max_steps` caps the number of optimizer steps (for smoke runs);
    `nan_injection_step` is a test hook that poisons the gradients at the given
    global step(s) to exercise the recovery policy; `resume_from` restarts from
    a previously written checkpoint directory.
    """
    cfg = cfg or FineTuneConfig()
    policy = policy or StabilityPolicy()
    inject_at = (
        {nan_injection_step}
        if isinstance(nan_injection_step, int)
        else set(nan_injection_step or ())
    )
    out = Path(out_dir)
    ckpt_root = out / "checkpoints"
    ckpt_root.mkdir(parents=True, exist_ok=True)

    if cfg.quantization != "none":
        log.warning(
            "quantization=%s requested; the built-in tiny backend trains in fp32 "
            "and only records the setting",
            cfg.quantization,
        )

    pairs = load_chat_jsonl(dataset)
    model = build_base_model(base_model, seed=cfg.seed)
    apply_lora(model, cfg.lora_rank, cfg.lora_alpha, cfg.lora_dropout)
    params = trainable_parameters(model)
    optimizer = torch.optim.AdamW(
        params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
    )
    trainable, total = count_parameters(model)
    log.info("training %d of %d parameters (LoRA rank %d)", trainable, total, cfg.lora_rank)

    epoch_done = 0
    global_step = 0
    fallback_active = False
    if resume_from is not None:
        state = _load_checkpoint(Path(resume_from), model, optimizer)
        epoch_done = state["epoch"]
        global_step = state["global_step"]
        fallback_active = state["fallback_active"]
        last_valid = (Path(resume_from), epoch_done)
        log.info("resumed from %s (epoch %d, step %d)", resume_from, epoch_done, global_step)
    else:
        init_dir = ckpt_root / "init"
        _save_checkpoint(init_dir, model, optimizer, 0, 0, False, base_model, cfg)
        last_valid = (init_dir, 0)

    loss_log = out / "loss.csv"
    events_log = out / "events.jsonl"
    events: list[dict] = []
    step_losses: list[float] = []
    mode = "a" if resume_from is not None and loss_log.exists() else "w"
    loss_fh = loss_log.open(mode, encoding="utf-8")
    events_fh = events_log.open(mode, encoding="utf-8")
    if mode == "w":
        loss_fh.write("# onkotune loss log\n")
        loss_fh.write(
            "# optimizer=AdamW schedule=constant loss=next-byte over the full "
            "question+answer sequence\n"
        )
        loss_fh.write(f"# base_model={base_model} trainable_params={trainable} total_params={total}\n")
        loss_fh.write(f"# config={json.dumps(asdict(cfg))}\n")
        loss_fh.write(f"# policy={json.dumps(asdict(policy))}\n")
        loss_fh.write("step,epoch,loss,lr,grad_norm\n")

    def emit_event(payload: dict) -> None:
        events.append(payload)
        events_fh.write(json.dumps(payload) + "\n")
        events_fh.flush()

    initial_loss: float | None = None
    budget_exhausted = False
    try:
        epoch = epoch_done + 1
        while epoch <= cfg.epochs and not budget_exhausted:
            generator = torch.Generator().manual_seed(cfg.seed * 100_000 + epoch)
            restarted = False
            for inputs, targets in batches(
                pairs, cfg.per_device_batch, cfg.max_seq_len, generator
            ):
                logits = model(inputs)
                loss = nn.functional.cross_entropy(
                    logits.reshape(-1, VOCAB_SIZE), targets.reshape(-1), ignore_index=-100
                )
                loss_value = float(loss.detach())
                if initial_loss is None:
                    initial_loss = loss_value
                optimizer.zero_grad()
                loss.backward()
                global_step += 1
                if global_step in inject_at:
                    params[0].grad.fill_(float("nan"))
                    log.info("test hook: injected NaN gradient at step %d", global_step)
                norm = _grad_norm(params)
                unstable = policy.nan_gradient_detection and (
                    not math.isfinite(norm) or not math.isfinite(loss_value)
                )
                if unstable:
                    emit_event({"step": global_step, "epoch": epoch, "event": "nan_detected"})
                    log.warning("non-finite gradient at step %d", global_step)
                    if fallback_active:
                        raise TrainingDiverged(
                            f"instability persisted after fallback at step {global_step}"
                        )
                    if policy.resume_from_last_valid_checkpoint:
                        restore_dir, restore_epoch = last_valid
                        _load_checkpoint(restore_dir, model, optimizer)
                        epoch = restore_epoch  # next loop iteration re-runs epoch+1
                    _set_lr(optimizer, policy.fallback_learning_rate)
                    fallback_active = True
                    emit_event(
                        {
                            "step": global_step,
                            "event": "resumed",
                            "restored_from": str(last_valid[0]),
                            "restored_epoch": last_valid[1],
                            "fallback_learning_rate": policy.fallback_learning_rate,
                            "max_gradient_norm": policy.max_gradient_norm,
                        }
                    )
                    log.warning(
                        "resumed from %s with lr=%g and clip=%g",
                        last_valid[0],
                        policy.fallback_learning_rate,
                        policy.max_gradient_norm,
                    )
                    restarted = True
                    break
                if fallback_active:
                    torch.nn.utils.clip_grad_norm_(params, policy.max_gradient_norm)
                    norm = min(norm, policy.max_gradient_norm)
                optimizer.step()
                step_losses.append(loss_value)
                loss_fh.write(
                    f"{global_step},{epoch},{loss_value:.6f},"
                    f"{optimizer.param_groups[0]['lr']:.8g},{norm:.6f}\n"
                )
                if max_steps is not None and len(step_losses) >= max_steps:
                    budget_exhausted = True
                    break
            if restarted:
                epoch += 1
                continue
            if not budget_exhausted:
                ckpt_dir = ckpt_root / f"epoch-{epoch}"
                _save_checkpoint(
                    ckpt_dir, model, optimizer, epoch, global_step, fallback_active, base_model, cfg
                )
                last_valid = (ckpt_dir, epoch)
                log.info("epoch %d done at step %d, checkpoint %s", epoch, global_step, ckpt_dir)
                epoch += 1
    finally:
        loss_fh.close()
        events_fh.close()

    checkpoint_dirs = sorted(
        (d for d in ckpt_root.iterdir() if d.name.startswith("epoch-")),
        key=lambda d: int(d.name.split("-")[1]),
    )
    assert initial_loss is not None
    return TrainResult(
        checkpoint_dirs=checkpoint_dirs,
        loss_log=loss_log,
        events_log=events_log,
        events=events,
        step_losses=step_losses,
        initial_loss=initial_loss,
        final_loss=step_losses[-1] if step_losses else initial_loss,
    )
