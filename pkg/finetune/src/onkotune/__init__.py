"""LoRA instruction tuning on chat-format JSONL with per-epoch checkpoints,
step-level loss logging and automatic recovery from NaN gradients."""

__version__ = "0.1.0"
