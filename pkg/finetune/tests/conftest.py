from __future__ import annotations

import json
from pathlib import Path

import pytest


def write_chat_jsonl(path: Path, n: int = 100) -> Path:
    """A dataset in the generator's chat JSONL format (the external interface
    this package consumes)."""
    with path.open("w", encoding="utf-8") as fh:
        for i in range(n):
            code = f"C{i % 80:02d}.{i % 10}"
            question = f"Was ist der ICD-10-Code für „Diagnose Nummer {i:03d}“?"
            answer = f"Der ICD-10-Code lautet {code}."
            fh.write(
                json.dumps(
                    {
                        "messages": [
                            {"role": "user", "content": question},
                            {"role": "assistant", "content": answer},
                        ],
                        "meta": {"task": "icd10_code", "formulation_id": 2, "gold_code": code},
                    },
                    ensure_ascii=False,
                )
                + "\n"
            )
    return path


@pytest.fixture
def dataset(tmp_path) -> Path:
    return write_chat_jsonl(tmp_path / "dataset.jsonl", n=100)
