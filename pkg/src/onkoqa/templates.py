"""Question/answer formulation templates for the seven instruction task types.

Template files are TSV with columns task, formulation_id, question_pattern,
answer_pattern. Question patterns contain exactly one `{text}` placeholder.
Answer patterns of code tasks contain `{code}`; recognition tasks carry a
positive and a negative answer variant separated by `|` in the same column
(procedure recognition has only the negative form and uses a single variant).
A built-in template set ships with the package; callers may substitute their
own file as long as it keeps the fixed per-task formulation counts.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path


class TaskKind(str, Enum):
    ICD10_CODE = "icd10_code"
    RECOGNIZE_YN = "recognize_yn"
    RECOGNIZE_YN_CODE = "recognize_yn_code"
    OPS_MAIN_CATEGORY = "ops_main_category"
    OPS_RECOGNIZE = "ops_recognize"
    ICDO_MORPHOLOGY = "icdo_morphology"
    ICDO_TOPOGRAPHY = "icdo_topography"


FORMULATION_COUNTS: dict[TaskKind, int] = {
    TaskKind.ICD10_CODE: 12,
    TaskKind.RECOGNIZE_YN: 6,
    TaskKind.RECOGNIZE_YN_CODE: 4,
    TaskKind.OPS_MAIN_CATEGORY: 10,
    TaskKind.OPS_RECOGNIZE: 4,
    TaskKind.ICDO_MORPHOLOGY: 10,
    TaskKind.ICDO_TOPOGRAPHY: 10,
}

RECOGNITION_TASKS = frozenset(
    {TaskKind.RECOGNIZE_YN, TaskKind.RECOGNIZE_YN_CODE, TaskKind.OPS_RECOGNIZE}
)
CODE_ANSWER_TASKS = frozenset(
    {
        TaskKind.ICD10_CODE,
        TaskKind.RECOGNIZE_YN_CODE,
        TaskKind.OPS_MAIN_CATEGORY,
        TaskKind.ICDO_MORPHOLOGY,
        TaskKind.ICDO_TOPOGRAPHY,
    }
)


class TemplateError(Exception):
    """Malformed or incomplete template file."""


@dataclass(frozen=True, slots=True)
class Template:
    task: TaskKind
    formulation_id: int
    question_pattern: str
    answer_pattern: str

    def question(self, text: str) -> str:
        return self.question_pattern.format(text=text)

    def answer(self, *, code: str | None = None, positive: bool | None = None) -> str:
        """Render the answer for one entry.

        Recognition tasks pick the positive or negative variant; code tasks
        substitute the gold code.
        """
        pattern = self.answer_pattern
        if "|" in pattern:
            if positive is None:
                raise ValueError(f"{self.task.value} answer needs a polarity")
            pos, neg = pattern.split("|", 1)
            pattern = pos if positive else neg
        if "{code}" in pattern:
            if code is None:
                raise ValueError(f"{self.task.value} answer needs a code")
            pattern = pattern.format(code=code)
        return pattern


def _validate(templates: list[Template]) -> None:
    by_task: dict[TaskKind, list[Template]] = {task: [] for task in TaskKind}
    for t in templates:
        by_task[t.task].append(t)
    for task, expected in FORMULATION_COUNTS.items():
        group = sorted(by_task[task], key=lambda t: t.formulation_id)
        ids = [t.formulation_id for t in group]
        if ids != list(range(1, expected + 1)):
            raise TemplateError(
                f"{task.value}: need formulation_ids 1..{expected}, got {ids}"
            )
        questions = [t.question_pattern for t in group]
        if len(set(questions)) != len(questions):
            raise TemplateError(f"{task.value}: question formulations must be pairwise distinct")
        for t in group:
            if t.question_pattern.count("{text}") != 1:
                raise TemplateError(
                    f"{task.value}#{t.formulation_id}: question needs exactly one {{text}}"
                )
            needs_code = task in CODE_ANSWER_TASKS
            for variant in t.answer_pattern.split("|"):
                if needs_code != ("{code}" in variant):
                    raise TemplateError(
                        f"{task.value}#{t.formulation_id}: answer/code placeholder mismatch"
                    )
            if task in RECOGNITION_TASKS:
                variants = t.answer_pattern.split("|")
                if task is TaskKind.OPS_RECOGNIZE:
                    if len(variants) != 1 or not variants[0].startswith("Nein"):
                        raise TemplateError(
                            f"{task.value}#{t.formulation_id}: expected a single 'Nein...' answer"
                        )
                elif len(variants) != 2 or not variants[0].startswith("Ja") or not variants[1].startswith("Nein"):
                    raise TemplateError(
                        f"{task.value}#{t.formulation_id}: expected 'Ja...|Nein...' answer variants"
                    )


def parse_templates(text: str) -> dict[TaskKind, list[Template]]:
    rows = list(csv.DictReader(text.splitlines(), delimiter="\t"))
    required = {"task", "formulation_id", "question_pattern", "answer_pattern"}
    if not rows or not required.issubset(rows[0].keys()):
        raise TemplateError(f"template file needs columns {sorted(required)}")
    templates: list[Template] = []
    for row in rows:
        try:
            task = TaskKind(row["task"].strip())
        except ValueError as exc:
            raise TemplateError(f"unknown task {row['task']!r}") from exc
        templates.append(
            Template(
                task=task,
                formulation_id=int(row["formulation_id"]),
                question_pattern=row["question_pattern"],
                answer_pattern=row["answer_pattern"],
            )
        )
    _validate(templates)
    out: dict[TaskKind, list[Template]] = {task: [] for task in TaskKind}
    for t in templates:
        out[t.task].append(t)
    for group in out.values():
        group.sort(key=lambda t: t.formulation_id)
    return out


def load_templates(path: str | Path | None = None) -> dict[TaskKind, list[Template]]:
    """Load templates from a TSV file, or the built-in set when path is None."""
    if path is None:
        text = resources.files("onkoqa.data").joinpath("templates.tsv").read_text("utf-8")
    else:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise TemplateError(f"cannot read template file {path}: {exc}") from exc
    return parse_templates(text)
