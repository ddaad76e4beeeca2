"""Instruction dataset synthesis from loaded catalogues.

Every eligible catalogue entry is crossed with every formulation of its task,
so per-task counts follow the identity count = formulations x entries. The
assembled dataset is shuffled with a seeded Fisher-Yates permutation and
written as chat-format JSONL, one conversation per line:

    {"messages": [{"role": "user", "content": Q},
                  {"role": "assistant", "content": A}],
     "meta": {"task": ..., "formulation_id": ..., "source_entry": ...,
              "gold_code": ..., "gold_yn": ...}}

Identical inputs and seed produce byte-identical output files.
"""

from __future__ import annotations

import json
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .catalog import CatalogEntry
from .codes import CodeSystem
from .templates import FORMULATION_COUNTS, TaskKind, Template

log = logging.getLogger(__name__)

MAX_ANSWER_CHARS = 120


class GenerationError(Exception):
    """Input pools or templates cannot produce a well-formed dataset."""


@dataclass(frozen=True, slots=True)
class QaPair:
    task: TaskKind
    formulation_id: int
    question: str
    answer: str
    gold_code: str | None
    gold_yn: bool | None
    source_entry: str


@dataclass(frozen=True, slots=True)
class TaskStats:
    count: int
    formulations: int
    entries: int
    proportion: float


@dataclass(frozen=True)
class DatasetManifest:
    total: int
    seed: int
    duplicate_count: int
    tasks: dict[str, TaskStats]
    sources: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {
            "total": self.total,
            "seed": self.seed,
            "duplicate_count": self.duplicate_count,
            "tasks": {
                name: {
                    "count": s.count,
                    "formulations": s.formulations,
                    "entries": s.entries,
                    "proportion": s.proportion,
                }
                for name, s in self.tasks.items()
            },
            "sources": self.sources,
        }


_TASK_SYSTEM: dict[TaskKind, CodeSystem] = {
    TaskKind.ICD10_CODE: CodeSystem.ICD10GM,
    TaskKind.RECOGNIZE_YN: CodeSystem.ICD10GM,
    TaskKind.RECOGNIZE_YN_CODE: CodeSystem.ICD10GM,
    TaskKind.OPS_MAIN_CATEGORY: CodeSystem.OPS,
    TaskKind.OPS_RECOGNIZE: CodeSystem.OPS,
    TaskKind.ICDO_MORPHOLOGY: CodeSystem.ICDO3_MORPHOLOGY,
    TaskKind.ICDO_TOPOGRAPHY: CodeSystem.ICDO3_TOPOGRAPHY,
}


def _check_pool(task: TaskKind, entries: Sequence[CatalogEntry]) -> None:
    system = _TASK_SYSTEM[task]
    for e in entries:
        if e.system is not system:
            raise GenerationError(
                f"{task.value} expects {system.value} entries, got {e.system.value} ({e.entry_id})"
            )
    if task is TaskKind.ICD10_CODE and any(not e.is_tumor for e in entries):
        raise GenerationError("icd10_code pool must contain tumor entries only")
    if task in (TaskKind.RECOGNIZE_YN, TaskKind.RECOGNIZE_YN_CODE):
        positives = sum(e.is_tumor for e in entries)
        if positives * 2 != len(entries):
            raise GenerationError(
                f"{task.value} pool must be balanced, got {positives} tumor vs "
                f"{len(entries) - positives} non-tumor entries"
            )


def _render_pair(task: TaskKind, template: Template, entry: CatalogEntry) -> QaPair:
    question = template.question(entry.text)
    gold_code: str | None = None
    gold_yn: bool | None = None
    if task is TaskKind.OPS_MAIN_CATEGORY:
        gold_code = entry.parsed.category3
        answer = template.answer(code=gold_code)
    elif task is TaskKind.OPS_RECOGNIZE:
        gold_yn = False
        answer = template.answer()
    elif task is TaskKind.RECOGNIZE_YN:
        gold_yn = entry.is_tumor
        answer = template.answer(positive=entry.is_tumor)
    elif task is TaskKind.RECOGNIZE_YN_CODE:
        gold_yn = entry.is_tumor
        gold_code = entry.parsed.normalized
        answer = template.answer(code=gold_code, positive=entry.is_tumor)
    else:
        gold_code = entry.parsed.normalized
        answer = template.answer(code=gold_code)
    if "\n" in answer or len(answer) > MAX_ANSWER_CHARS:
        raise GenerationError(
            f"{task.value}#{template.formulation_id}: answer must be a single line "
            f"of at most {MAX_ANSWER_CHARS} characters: {answer!r}"
        )
    return QaPair(
        task=task,
        formulation_id=template.formulation_id,
        question=question,
        answer=answer,
        gold_code=gold_code,
        gold_yn=gold_yn,
        source_entry=entry.entry_id,
    )


def generate_task(
    task: TaskKind,
    entries: Sequence[CatalogEntry],
    templates: Sequence[Template],
    seed: int,
) -> list[QaPair]:
    """Cross each entry with each formulation of the task.

    Emits exactly len(templates) x len(entries) pairs in a seeded per-task
    order. Recognition pools must hold equal numbers of tumor and non-tumor
    entries.
    """
    group = sorted((t for t in templates if t.task is task), key=lambda t: t.formulation_id)
    expected = FORMULATION_COUNTS[task]
    if [t.formulation_id for t in group] != list(range(1, expected + 1)):
        raise GenerationError(f"{task.value}: templates must cover formulations 1..{expected}")
    _check_pool(task, entries)
    pairs = [_render_pair(task, template, entry) for entry in entries for template in group]
    random.Random(f"{seed}:{task.value}").shuffle(pairs)
    return pairs


def pair_to_json(pair: QaPair) -> dict:
    return {
        "messages": [
            {"role": "user", "content": pair.question},
            {"role": "assistant", "content": pair.answer},
        ],
        "meta": {
            "task": pair.task.value,
            "formulation_id": pair.formulation_id,
            "source_entry": pair.source_entry,
            "gold_code": pair.gold_code,
            "gold_yn": pair.gold_yn,
        },
    }


def assemble_dataset(
    parts: Iterable[Sequence[QaPair]],
    seed: int,
    out: str | Path,
    sources: dict | None = None,
) -> DatasetManifest:
    """Concatenate task parts, shuffle with the seed and write chat JSONL."""
    pairs: list[QaPair] = []
    for part in parts:
        pairs.extend(part)
    if not pairs:
        raise GenerationError("refusing to assemble an empty dataset")
    random.Random(seed).shuffle(pairs)

    duplicates = sum(
        n - 1 for n in Counter((p.question, p.answer) for p in pairs).values() if n > 1
    )
    if duplicates:
        log.warning("dataset contains %d duplicate (question, answer) pairs", duplicates)

    out = Path(out)
    with out.open("w", encoding="utf-8", newline="") as fh:
        for pair in pairs:
            fh.write(json.dumps(pair_to_json(pair), ensure_ascii=False, separators=(",", ":")))
            fh.write("\n")

    total = len(pairs)
    task_stats: dict[str, TaskStats] = {}
    for task in TaskKind:
        task_pairs = [p for p in pairs if p.task is task]
        if not task_pairs:
            continue
        formulations = len({p.formulation_id for p in task_pairs})
        task_stats[task.value] = TaskStats(
            count=len(task_pairs),
            formulations=formulations,
            entries=len({p.source_entry for p in task_pairs}),
            proportion=len(task_pairs) / total,
        )
    return DatasetManifest(
        total=total,
        seed=seed,
        duplicate_count=duplicates,
        tasks=task_stats,
        sources=sources or {},
    )


@dataclass(frozen=True, slots=True)
class ExpectedRow:
    task: TaskKind
    formulations: int
    count: int
    proportion_pct: float


# Cardinalities of the published training dataset; `verify_manifest` checks a
# generated manifest against these rows exactly.
REFERENCE_ROWS: tuple[ExpectedRow, ...] = (
    ExpectedRow(TaskKind.ICD10_CODE, 12, 163_200, 31.5),
    ExpectedRow(TaskKind.RECOGNIZE_YN, 6, 163_200, 31.5),
    ExpectedRow(TaskKind.RECOGNIZE_YN_CODE, 4, 108_800, 21.0),
    ExpectedRow(TaskKind.OPS_MAIN_CATEGORY, 10, 29_640, 5.7),
    ExpectedRow(TaskKind.OPS_RECOGNIZE, 4, 11_856, 2.3),
    ExpectedRow(TaskKind.ICDO_MORPHOLOGY, 10, 28_040, 5.4),
    ExpectedRow(TaskKind.ICDO_TOPOGRAPHY, 10, 13_380, 2.6),
)
REFERENCE_TOTAL = 518_116


def _pct_1(fraction: float) -> float:
    """Percentage with one decimal, half-up (display rounding)."""
    return math.floor(fraction * 1000 + 0.5) / 10


@dataclass(frozen=True)
class VerificationReport:
    rows: list[tuple[str, bool, str]]

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.rows)

    def render(self) -> str:
        lines = [
            f"{'PASS' if passed else 'FAIL'}  {name}: {detail}" for name, passed, detail in self.rows
        ]
        lines.append("all rows pass" if self.ok else "verification FAILED")
        return "\n".join(lines)


def verify_manifest(
    manifest: DatasetManifest,
    expected_rows: Sequence[ExpectedRow] = REFERENCE_ROWS,
    expected_total: int | None = REFERENCE_TOTAL,
) -> VerificationReport:
    """Check per-task counts, formulation counts, proportions and the total."""
    rows: list[tuple[str, bool, str]] = []
    for row in expected_rows:
        stats = manifest.tasks.get(row.task.value)
        if stats is None:
            rows.append((row.task.value, False, "task missing from manifest"))
            continue
        problems = []
        if stats.count != row.count:
            problems.append(f"count {stats.count} != {row.count}")
        if stats.formulations != row.formulations:
            problems.append(f"formulations {stats.formulations} != {row.formulations}")
        if _pct_1(stats.proportion) != row.proportion_pct:
            problems.append(f"proportion {_pct_1(stats.proportion)}% != {row.proportion_pct}%")
        if problems:
            rows.append((row.task.value, False, "; ".join(problems)))
        else:
            rows.append(
                (row.task.value, True, f"{stats.count} pairs ({row.proportion_pct}%)")
            )
    if expected_total is not None and expected_rows:
        ok = manifest.total == expected_total
        rows.append(
            (
                "total",
                ok,
                f"{manifest.total} pairs" if ok else f"total {manifest.total} != {expected_total}",
            )
        )
    return VerificationReport(rows=rows)
