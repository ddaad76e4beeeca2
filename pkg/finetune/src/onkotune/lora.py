"""Low-rank adapters on nn.Linear: the base weights stay frozen, only the
rank-r update matrices train."""

from __future__ import annotations

import math

import torch
from torch import nn


class LoRALinear(nn.Module):
    """y = W0 x + (alpha / r) * B A dropout(x), with W0 (and bias) frozen.

    B starts at zero so the wrapped module is initially identical to the base
    layer; A uses Kaiming init as usual.
    """

    def __init__(self, base: nn.Linear, rank: int, alpha: float, dropout: float) -> None:
        super().__init__()
        if rank < 1:
            raise ValueError(f"LoRA rank must be positive, got {rank}")
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scaling = alpha / rank
        self.dropout = nn.Dropout(dropout)
        self.lora_a = nn.Parameter(torch.empty(rank, base.in_features))
        self.lora_b = nn.Parameter(torch.zeros(base.out_features, rank))
        nn.init.kaiming_uniform_(self.lora_a, a=math.sqrt(5))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        update = self.dropout(x) @ self.lora_a.T @ self.lora_b.T
        return self.base(x) + self.scaling * update


def apply_lora(model: nn.Module, rank: int, alpha: float, dropout: float) -> nn.Module:
    """Freeze the whole model, then wrap every nn.Linear with a LoRA adapter."""
    for p in model.parameters():
        p.requires_grad_(False)
    _wrap_linears(model, rank, alpha, dropout)
    return model


def _wrap_linears(module: nn.Module, rank: int, alpha: float, dropout: float) -> None:
    for name, child in list(module.named_children()):
        if isinstance(child, nn.Linear):
            setattr(module, name, LoRALinear(child, rank, alpha, dropout))
        else:
            _wrap_linears(child, rank, alpha, dropout)


def trainable_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def count_parameters(model: nn.Module) -> tuple[int, int]:
    """(trainable, total) parameter counts."""
    trainable = sum(p.numel() for p in model.parameters() if p.requires_grad)
    total = sum(p.numel() for p in model.parameters())
    return trainable, total
