"""A small byte-level causal transformer used as the desk-scale base model.

The registry resolves model identifiers; "tiny" (alias "tiny-random") is a
randomly initialized 2-layer model that trains on CPU in seconds. Real hosted
checkpoints are out of scope here: training always goes through this module's
registry, and evaluation of served models is the job of the evaluation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .data import VOCAB_SIZE


@dataclass(frozen=True, slots=True)
class ModelSpec:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    max_seq_len: int = 256


class Block(nn.Module):
    def __init__(self, spec: ModelSpec) -> None:
        super().__init__()
        self.ln1 = nn.LayerNorm(spec.d_model)
        self.q = nn.Linear(spec.d_model, spec.d_model)
        self.k = nn.Linear(spec.d_model, spec.d_model)
        self.v = nn.Linear(spec.d_model, spec.d_model)
        self.o = nn.Linear(spec.d_model, spec.d_model)
        self.n_heads = spec.n_heads
        self.ln2 = nn.LayerNorm(spec.d_model)
        self.fc1 = nn.Linear(spec.d_model, 4 * spec.d_model)
        self.fc2 = nn.Linear(4 * spec.d_model, spec.d_model)

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        batch, seq, dim = x.shape
        head_dim = dim // self.n_heads

        def split(t: torch.Tensor) -> torch.Tensor:
            return t.view(batch, seq, self.n_heads, head_dim).transpose(1, 2)

        q, k, v = split(self.q(x)), split(self.k(x)), split(self.v(x))
        scores = q @ k.transpose(-2, -1) / math.sqrt(head_dim)
        causal = torch.triu(torch.ones(seq, seq, dtype=torch.bool, device=x.device), diagonal=1)
        scores = scores.masked_fill(causal, float("-inf"))
        out = torch.softmax(scores, dim=-1) @ v
        return self.o(out.transpose(1, 2).reshape(batch, seq, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._attend(self.ln1(x))
        return x + self.fc2(torch.nn.functional.gelu(self.fc1(self.ln2(x))))


class TinyCausalLM(nn.Module):
    def __init__(self, spec: ModelSpec | None = None) -> None:
        super().__init__()
        self.spec = spec or ModelSpec()
        self.tok_emb = nn.Embedding(VOCAB_SIZE, self.spec.d_model)
        self.pos_emb = nn.Embedding(self.spec.max_seq_len, self.spec.d_model)
        self.blocks = nn.ModuleList(Block(self.spec) for _ in range(self.spec.n_layers))
        self.ln_out = nn.LayerNorm(self.spec.d_model)
        self.head = nn.Linear(self.spec.d_model, VOCAB_SIZE)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        seq = tokens.shape[1]
        if seq > self.spec.max_seq_len:
            raise ValueError(f"sequence length {seq} exceeds maximum {self.spec.max_seq_len}")
        positions = torch.arange(seq, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(positions)
        for block in self.blocks:
            x = block(x)
        return self.head(self.ln_out(x))


def build_base_model(identifier: str, seed: int = 0) -> nn.Module:
    """Resolve a model identifier to a freshly initialized module."""
    if identifier in ("tiny", "tiny-random"):
        torch.manual_seed(seed)
        return TinyCausalLM()
    raise ValueError(
        f"unknown base model {identifier!r}; this desk-scale runner ships only the "
        f"built-in 'tiny' model"
    )
