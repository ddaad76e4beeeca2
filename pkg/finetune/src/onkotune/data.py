"""Chat-JSONL loading and byte-level tokenization.

The dataset format is one conversation per line:

    {"messages": [{"role": "user", "content": Q},
                  {"role": "assistant", "content": A}], "meta": {...}}

Only the messages list is consumed; meta is carried along untouched. Texts are
tokenized at the byte level (German umlauts and typographic quotes need no
vocabulary file that way), with special ids for padding and the turn structure.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import torch

PAD_ID = 256
BOS_ID = 257
SEP_ID = 258  # between user and assistant turns
EOS_ID = 259
VOCAB_SIZE = 260


class DatasetError(Exception):
    """Malformed JSONL input; the message names the offending line."""


@dataclass(frozen=True, slots=True)
class ChatPair:
    question: str
    answer: str


def load_chat_jsonl(path: str | Path) -> list[ChatPair]:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DatasetError(f"cannot read dataset {path}: {exc}") from exc
    pairs: list[ChatPair] = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            messages = obj["messages"]
            roles = [m["role"] for m in messages]
            if roles != ["user", "assistant"]:
                raise ValueError(f"expected [user, assistant] roles, got {roles}")
            pairs.append(ChatPair(question=messages[0]["content"], answer=messages[1]["content"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise DatasetError(f"{path}:{lineno}: malformed dataset line: {exc}") from exc
    if not pairs:
        raise DatasetError(f"{path}: dataset is empty")
    return pairs


def encode_pair(pair: ChatPair, max_seq_len: int) -> list[int]:
    ids = (
        [BOS_ID]
        + list(pair.question.encode("utf-8"))
        + [SEP_ID]
        + list(pair.answer.encode("utf-8"))
        + [EOS_ID]
    )
    return ids[:max_seq_len]


def batches(
    pairs: Sequence[ChatPair],
    batch_size: int,
    max_seq_len: int,
    generator: torch.Generator,
) -> Iterator[tuple[torch.Tensor, torch.Tensor]]:
    """Yield (inputs, targets) batches for next-token prediction.

    Sequences are shuffled per call, padded per batch; targets are the inputs
    shifted left with PAD positions masked out of the loss.
    """
    order = torch.randperm(len(pairs), generator=generator).tolist()
    for start in range(0, len(order), batch_size):
        chunk = [encode_pair(pairs[i], max_seq_len) for i in order[start : start + batch_size]]
        width = max(len(ids) for ids in chunk)
        tokens = torch.full((len(chunk), width), PAD_ID, dtype=torch.long)
        for row, ids in enumerate(chunk):
            tokens[row, : len(ids)] = torch.tensor(ids, dtype=torch.long)
        inputs = tokens[:, :-1]
        targets = tokens[:, 1:].clone()
        targets[targets == PAD_ID] = -100  # ignored by cross entropy
        yield inputs, targets


def steps_per_epoch(n_pairs: int, batch_size: int) -> int:
    return (n_pairs + batch_size - 1) // batch_size
