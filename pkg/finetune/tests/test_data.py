from __future__ import annotations

import json

import pytest
import torch

from onkotune.data import (
    BOS_ID,
    EOS_ID,
    PAD_ID,
    SEP_ID,
    ChatPair,
    DatasetError,
    batches,
    encode_pair,
    load_chat_jsonl,
    steps_per_epoch,
)


def test_load_chat_jsonl(dataset):
    pairs = load_chat_jsonl(dataset)
    assert len(pairs) == 100
    assert pairs[0].question.startswith("Was ist der ICD-10-Code")
    assert pairs[0].answer.startswith("Der ICD-10-Code lautet")


def test_malformed_line_reports_line_number(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = json.dumps(
        {"messages": [{"role": "user", "content": "Q"}, {"role": "assistant", "content": "A"}]}
    )
    path.write_text(good + "\n" + "{not json}\n", encoding="utf-8")
    with pytest.raises(DatasetError, match=":2:"):
        load_chat_jsonl(path)


def test_wrong_roles_rejected(tmp_path):
    path = tmp_path / "roles.jsonl"
    path.write_text(
        json.dumps({"messages": [{"role": "system", "content": "Q"}]}) + "\n", encoding="utf-8"
    )
    with pytest.raises(DatasetError, match=":1:"):
        load_chat_jsonl(path)


def test_empty_dataset_rejected(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("", encoding="utf-8")
    with pytest.raises(DatasetError, match="empty"):
        load_chat_jsonl(path)


def test_encode_pair_structure():
    ids = encode_pair(ChatPair("AB", "C"), max_seq_len=64)
    assert ids[0] == BOS_ID
    assert ids[-1] == EOS_ID
    assert SEP_ID in ids
    assert ids[1:3] == [65, 66]


def test_encode_pair_truncates():
    ids = encode_pair(ChatPair("x" * 500, "y"), max_seq_len=64)
    assert len(ids) == 64


def test_batches_shapes_and_masking(dataset):
    pairs = load_chat_jsonl(dataset)
    generator = torch.Generator().manual_seed(0)
    inputs, targets = next(iter(batches(pairs, batch_size=6, max_seq_len=128, generator=generator)))
    assert inputs.shape == targets.shape
    assert inputs.shape[0] == 6
    assert (targets == PAD_ID).sum() == 0  # pads are remapped to the ignore index
    assert (targets == -100).sum() >= 0


def test_steps_per_epoch():
    assert steps_per_epoch(100, 6) == 17
    assert steps_per_epoch(12, 6) == 2
    assert steps_per_epoch(13, 6) == 3
