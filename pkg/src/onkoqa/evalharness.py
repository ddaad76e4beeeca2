"""Evaluation harness: build questions from a labeled test set, query an
OpenAI-compatible chat-completions endpoint with bounded concurrency, score the
transcript with the code extractors, and render per-task reports plus a
base-vs-best checkpoint comparison.

Metric conventions: accuracy and partial accuracy use the number of valid
(interpretable) answers as denominator; the rates over all answers are carried
alongside in the JSON for transparency. When no answer is valid the metrics
are null rather than 0/0.

Test-set TSV columns: case_id, text, icd10, icdo_topo, is_tumor. Transcript
JSONL rows: {case_id, question, answer_text, latency_s, status}.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import httpx

from .codes import (
    CodeSystem,
    ExtractionStatus,
    YesNo,
    extract_code,
    extract_yes_no,
    parse_code,
)
from .templates import TaskKind, Template

log = logging.getLogger(__name__)

DEFAULT_THINKING_DELIMITER = "</think>"


class HarnessError(Exception):
    """Bad harness input: empty case lists, mismatched transcripts, ..."""


class EndpointUnreachable(Exception):
    """The inference endpoint could not be reached at all."""


class EvalTask(str, Enum):
    ICD10 = "icd10"
    ICDO_TOPO = "icdo_topo"
    TUMOR_YN = "tumor_yn"

    @property
    def template_task(self) -> TaskKind:
        return {
            EvalTask.ICD10: TaskKind.ICD10_CODE,
            EvalTask.ICDO_TOPO: TaskKind.ICDO_TOPOGRAPHY,
            EvalTask.TUMOR_YN: TaskKind.RECOGNIZE_YN,
        }[self]

    @property
    def code_system(self) -> CodeSystem | None:
        return {
            EvalTask.ICD10: CodeSystem.ICD10GM,
            EvalTask.ICDO_TOPO: CodeSystem.ICDO3_TOPOGRAPHY,
            EvalTask.TUMOR_YN: None,
        }[self]


@dataclass(frozen=True, slots=True)
class TestCase:
    __test__ = False  # keep pytest from collecting this as a test class

    case_id: str
    diagnosis_text: str
    gold_icd10: str
    gold_icdo_topo: str
    is_tumor: bool = True


@dataclass(frozen=True, slots=True)
class SamplingConfig:
    temperature: float = 0.0
    top_p: float | None = None
    top_k: int | None = None
    min_p: float | None = None
    max_tokens: int = 256


SAMPLING_PRESETS: dict[str, SamplingConfig] = {
    "deterministic": SamplingConfig(temperature=0.0),
    "thinking": SamplingConfig(temperature=0.6, top_p=0.95, top_k=20, min_p=0.0),
}


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    max_in_flight: int = 4
    timeout: float = 60.0
    short_answer_instruction: str | None = None
    token_env: str = "OPENAI_API_KEY"

    def __post_init__(self) -> None:
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be at least 1")


@dataclass(frozen=True, slots=True)
class EvalQuestion:
    case_id: str
    task: EvalTask
    formulation_id: int
    text: str


@dataclass(frozen=True, slots=True)
class TranscriptRow:
    case_id: str
    question: str
    answer_text: str
    latency_s: float
    status: str  # "ok" | "timeout" | "error"


def load_cases_tsv(path: str | Path) -> list[TestCase]:
    """Read test cases, normalizing gold codes and deduplicating by text."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise HarnessError(f"cannot read test cases {path}: {exc}") from exc
    rows = list(csv.DictReader(text.splitlines(), delimiter="\t"))
    required = {"case_id", "text", "icd10", "icdo_topo", "is_tumor"}
    if not rows or not required.issubset(rows[0].keys()):
        raise HarnessError(f"{path}: test-set TSV needs columns {sorted(required)}")
    cases: list[TestCase] = []
    seen_texts: set[str] = set()
    dropped = 0
    for row in rows:
        diagnosis = row["text"].strip()
        if not diagnosis:
            raise HarnessError(f"{path}: case {row['case_id']!r} has empty text")
        if diagnosis in seen_texts:
            dropped += 1
            continue
        seen_texts.add(diagnosis)
        cases.append(
            TestCase(
                case_id=row["case_id"].strip(),
                diagnosis_text=diagnosis,
                gold_icd10=parse_code(row["icd10"], CodeSystem.ICD10GM).normalized,
                gold_icdo_topo=parse_code(row["icdo_topo"], CodeSystem.ICDO3_TOPOGRAPHY).normalized,
                is_tumor=row["is_tumor"].strip() in ("1", "true", "True"),
            )
        )
    if dropped:
        log.info("dropped %d duplicate diagnosis texts from %s", dropped, path)
    return cases


def build_questions(
    cases: Sequence[TestCase],
    task: EvalTask,
    templates: Sequence[Template],
    seed: int,
    short_answer_instruction: str | None = None,
    fixed_formulation: int | None = None,
) -> list[EvalQuestion]:
    """One question per case, with a deterministically chosen formulation.

    Default selection is seeded round-robin over a seed-shuffled permutation of
    the formulations; pass fixed_formulation to use a single one throughout.
    """
    if not cases:
        raise HarnessError("cannot build questions from an empty case list")
    group = sorted(
        (t for t in templates if t.task is task.template_task), key=lambda t: t.formulation_id
    )
    if not group:
        raise HarnessError(f"no templates available for task {task.value}")
    if fixed_formulation is not None:
        chosen = [t for t in group if t.formulation_id == fixed_formulation]
        if not chosen:
            raise HarnessError(f"formulation {fixed_formulation} not found for {task.value}")
        group = chosen
    order = list(group)
    random.Random(f"{seed}:{task.value}").shuffle(order)
    questions = []
    for i, case in enumerate(cases):
        if not case.diagnosis_text.strip():
            raise HarnessError(f"case {case.case_id} has empty diagnosis text")
        template = order[i % len(order)]
        text = template.question(case.diagnosis_text)
        if short_answer_instruction:
            text = f"{text} {short_answer_instruction}"
        questions.append(
            EvalQuestion(
                case_id=case.case_id,
                task=task,
                formulation_id=template.formulation_id,
                text=text,
            )
        )
    return questions


def _build_payload(question: EvalQuestion, cfg: EndpointConfig) -> dict:
    payload: dict = {
        "model": cfg.model_name,
        "messages": [{"role": "user", "content": question.text}],
        "temperature": cfg.sampling.temperature,
        "max_tokens": cfg.sampling.max_tokens,
    }
    if cfg.sampling.top_p is not None:
        payload["top_p"] = cfg.sampling.top_p
    if cfg.sampling.top_k is not None:
        payload["top_k"] = cfg.sampling.top_k
    if cfg.sampling.min_p is not None:
        payload["min_p"] = cfg.sampling.min_p
    return payload


def _post_once(client: httpx.Client, url: str, payload: dict, headers: dict) -> str:
    response = client.post(url, json=payload, headers=headers)
    response.raise_for_status()
    data = response.json()
    return str(data["choices"][0]["message"]["content"])


def _ask(
    client: httpx.Client, question: EvalQuestion, cfg: EndpointConfig, headers: dict
) -> TranscriptRow:
    url = cfg.base_url.rstrip("/") + "/v1/chat/completions"
    payload = _build_payload(question, cfg)
    start = time.perf_counter()
    status = "ok"
    answer_text = ""
    try:
        try:
            answer_text = _post_once(client, url, payload, headers)
        except httpx.TimeoutException:
            status = "timeout"
        except httpx.TransportError:
            # One retry on connection-level trouble; timeouts above already
            # consumed their full budget and are recorded as-is.
            answer_text = _post_once(client, url, payload, headers)
    except httpx.TimeoutException:
        status = "timeout"
    except (httpx.HTTPError, KeyError, IndexError, ValueError) as exc:
        log.warning("question %s failed: %s", question.case_id, exc)
        status = "error"
    latency = time.perf_counter() - start
    return TranscriptRow(
        case_id=question.case_id,
        question=question.text,
        answer_text=answer_text,
        latency_s=latency,
        status=status,
    )


def query_endpoint(questions: Sequence[EvalQuestion], cfg: EndpointConfig) -> list[TranscriptRow]:
    """Send all questions with at most cfg.max_in_flight outstanding requests.

    Returns rows in canonical case_id order regardless of completion order.
    Raises EndpointUnreachable if the server cannot be contacted at all.
    """
    headers = {}
    token = os.environ.get(cfg.token_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    with httpx.Client(timeout=cfg.timeout) as client:
        try:
            client.get(cfg.base_url, timeout=min(cfg.timeout, 10.0))
        except httpx.TransportError as exc:
            raise EndpointUnreachable(f"endpoint {cfg.base_url} is unreachable: {exc}") from exc
        with ThreadPoolExecutor(max_workers=cfg.max_in_flight) as pool:
            rows = list(pool.map(lambda q: _ask(client, q, cfg, headers), questions))
    return sorted(rows, key=lambda r: r.case_id)


def write_transcript(rows: Sequence[TranscriptRow], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        for row in rows:
            fh.write(
                json.dumps(
                    {
                        "case_id": row.case_id,
                        "question": row.question,
                        "answer_text": row.answer_text,
                        "latency_s": row.latency_s,
                        "status": row.status,
                    },
                    ensure_ascii=False,
                )
            )
            fh.write("\n")


def read_transcript(path: str | Path) -> list[TranscriptRow]:
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        data = json.loads(line)
        rows.append(
            TranscriptRow(
                case_id=data["case_id"],
                question=data["question"],
                answer_text=data["answer_text"],
                latency_s=float(data["latency_s"]),
                status=data["status"],
            )
        )
    return rows


@dataclass(frozen=True, slots=True)
class CaseRecord:
    case_id: str
    status: str
    valid: bool
    exact: bool
    partial: bool
    extracted: str | None
    gold: str
    latency_s: float

    def as_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "status": self.status,
            "valid": self.valid,
            "exact": self.exact,
            "partial": self.partial,
            "extracted": self.extracted,
            "gold": self.gold,
            "latency_s": self.latency_s,
        }


@dataclass(frozen=True)
class EvalReport:
    task: EvalTask
    n_total: int
    n_valid: int
    n_correct: int
    n_partial_correct: int
    accuracy: float | None
    partial_accuracy: float | None
    invalid_rate: float
    accuracy_over_total: float
    partial_over_total: float
    mean_latency_s: float | None
    records: tuple[CaseRecord, ...] = ()

    def as_dict(self, include_records: bool = True) -> dict:
        data = {
            "task": self.task.value,
            "n_total": self.n_total,
            "n_valid": self.n_valid,
            "n_correct": self.n_correct,
            "n_partial_correct": self.n_partial_correct,
            "accuracy": self.accuracy,
            "partial_accuracy": self.partial_accuracy,
            "invalid_rate": self.invalid_rate,
            "accuracy_over_total": self.accuracy_over_total,
            "partial_over_total": self.partial_over_total,
            "mean_latency_s": self.mean_latency_s,
        }
        if include_records:
            data["records"] = [r.as_dict() for r in self.records]
        return data


def report_from_dict(data: dict) -> EvalReport:
    return EvalReport(
        task=EvalTask(data["task"]),
        n_total=data["n_total"],
        n_valid=data["n_valid"],
        n_correct=data["n_correct"],
        n_partial_correct=data["n_partial_correct"],
        accuracy=data["accuracy"],
        partial_accuracy=data["partial_accuracy"],
        invalid_rate=data["invalid_rate"],
        accuracy_over_total=data["accuracy_over_total"],
        partial_over_total=data["partial_over_total"],
        mean_latency_s=data.get("mean_latency_s"),
    )


def _strip_thinking(text: str, delimiter: str | None) -> str:
    if delimiter and delimiter in text:
        return text.split(delimiter, 1)[1]
    return text


def score(
    transcript: Sequence[TranscriptRow],
    cases: Sequence[TestCase],
    task: EvalTask,
    thinking_delimiter: str | None = DEFAULT_THINKING_DELIMITER,
) -> EvalReport:
    """Score a transcript against the gold labels (pure, replayable offline)."""
    by_case = {c.case_id: c for c in cases}
    if len(by_case) != len(cases):
        raise HarnessError("duplicate case_ids in test set")
    transcript_ids = {row.case_id for row in transcript}
    if transcript_ids != set(by_case) or len(transcript) != len(cases):
        raise HarnessError(
            f"transcript does not match cases: {len(transcript)} rows vs {len(cases)} cases"
        )

    records: list[CaseRecord] = []
    for row in sorted(transcript, key=lambda r: r.case_id):
        case = by_case[row.case_id]
        valid = exact = partial = False
        extracted: str | None = None
        if task is EvalTask.TUMOR_YN:
            gold = "ja" if case.is_tumor else "nein"
            if row.status == "ok":
                verdict = extract_yes_no(_strip_thinking(row.answer_text, thinking_delimiter))
                if verdict is not YesNo.INVALID:
                    valid = True
                    extracted = "ja" if verdict is YesNo.YES else "nein"
                    exact = partial = extracted == gold
        else:
            system = task.code_system
            assert system is not None
            gold = case.gold_icd10 if task is EvalTask.ICD10 else case.gold_icdo_topo
            if row.status == "ok":
                outcome = extract_code(_strip_thinking(row.answer_text, thinking_delimiter), system)
                if outcome.status is ExtractionStatus.VALID:
                    assert outcome.code is not None
                    valid = True
                    extracted = outcome.code.normalized
                    exact = extracted == gold
                    partial = outcome.code.category3 == gold[:3]
        records.append(
            CaseRecord(
                case_id=row.case_id,
                status=row.status,
                valid=valid,
                exact=exact,
                partial=partial,
                extracted=extracted,
                gold=gold,
                latency_s=row.latency_s,
            )
        )

    n_total = len(records)
    n_valid = sum(r.valid for r in records)
    n_correct = sum(r.exact for r in records)
    n_partial = sum(r.partial for r in records)
    ok_latencies = [r.latency_s for r in records if r.status == "ok"]
    return EvalReport(
        task=task,
        n_total=n_total,
        n_valid=n_valid,
        n_correct=n_correct,
        n_partial_correct=n_partial,
        accuracy=n_correct / n_valid if n_valid else None,
        partial_accuracy=(n_partial / n_valid if n_valid else None)
        if task is not EvalTask.TUMOR_YN
        else None,
        invalid_rate=1.0 - n_valid / n_total,
        accuracy_over_total=n_correct / n_total,
        partial_over_total=n_partial / n_total,
        mean_latency_s=sum(ok_latencies) / len(ok_latencies) if ok_latencies else None,
        records=tuple(records),
    )


def subsample(cases: Sequence[TestCase], fraction: float, seed: int) -> list[TestCase]:
    """Seeded sample without replacement of round(fraction * n) cases.

    Rounding is half-up; the sampled cases keep their original order.
    """
    if not 0 < fraction <= 1:
        raise HarnessError(f"fraction must lie in (0, 1], got {fraction}")
    k = math.floor(fraction * len(cases) + 0.5)
    indices = sorted(random.Random(seed).sample(range(len(cases)), k))
    return [cases[i] for i in indices]


def _fmt(value: float | None) -> str:
    return "n/a" if value is None else f"{100 * value:.2f}%"


def render_report_table(reports: dict[EvalTask, EvalReport]) -> str:
    """Aligned text table, one row per task, columns Acc. / P. acc. / Inv."""
    header = f"{'Task':<14}{'Acc.':>10}{'P. acc.':>10}{'Inv.':>10}{'n':>8}"
    lines = [header]
    labels = {EvalTask.ICD10: "ICD-10", EvalTask.ICDO_TOPO: "ICD-O", EvalTask.TUMOR_YN: "Tumor y/n"}
    for task in EvalTask:
        report = reports.get(task)
        if report is None:
            continue
        lines.append(
            f"{labels[task]:<14}{_fmt(report.accuracy):>10}{_fmt(report.partial_accuracy):>10}"
            f"{_fmt(report.invalid_rate):>10}{report.n_total:>8}"
        )
    return "\n".join(lines)


@dataclass(frozen=True)
class CheckpointComparison:
    best_epoch: int
    base: dict[EvalTask, EvalReport]
    best: dict[EvalTask, EvalReport]

    def as_dict(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "base": {t.value: r.as_dict(include_records=False) for t, r in self.base.items()},
            "best": {t.value: r.as_dict(include_records=False) for t, r in self.best.items()},
        }

    def render(self) -> str:
        groups = [("ICD-10", ["Acc.", "P. acc.", "Inv."]), ("ICD-O", ["Acc.", "P. acc.", "Inv."]), ("Tumor diagnosis (y/n)", ["Acc.", "Inv."])]
        widths = [max(len(label), 10 * len(cols)) for label, cols in groups]

        def line(first: str, group_texts: list[str]) -> str:
            return f"{first:<18}" + "  ".join(
                text.rjust(width) for text, width in zip(group_texts, widths)
            )

        def cells(reports: dict[EvalTask, EvalReport]) -> list[str]:
            icd10 = reports.get(EvalTask.ICD10)
            icdo = reports.get(EvalTask.ICDO_TOPO)
            yn = reports.get(EvalTask.TUMOR_YN)

            def code_group(rep: EvalReport | None) -> str:
                values = (
                    [_fmt(rep.accuracy), _fmt(rep.partial_accuracy), _fmt(rep.invalid_rate)]
                    if rep
                    else ["n/a"] * 3
                )
                return "".join(f"{v:>10}" for v in values)

            yn_values = [_fmt(yn.accuracy), _fmt(yn.invalid_rate)] if yn else ["n/a"] * 2
            return [code_group(icd10), code_group(icdo), "".join(f"{v:>10}" for v in yn_values)]

        return "\n".join(
            [
                line("", [label for label, _ in groups]),
                line("", ["".join(f"{c:>10}" for c in cols) for _, cols in groups]),
                line("Base model", cells(self.base)),
                line(f"Trained (best={self.best_epoch})", cells(self.best)),
            ]
        )


def compare_checkpoints(
    reports: dict[int, dict[EvalTask, EvalReport]],
) -> CheckpointComparison:
    """Pick the best trained epoch by exact ICD-10 accuracy (ties: lowest epoch).

    Epoch 0 is the base model; at least one trained epoch is required, and
    every epoch must carry an ICD-10 report.
    """
    if 0 not in reports:
        raise HarnessError("epoch 0 (base model) report missing")
    trained = sorted(e for e in reports if e >= 1)
    if not trained:
        raise HarnessError("need at least one trained epoch")
    for epoch, by_task in reports.items():
        if EvalTask.ICD10 not in by_task:
            raise HarnessError(f"epoch {epoch}: ICD-10 report missing")

    def icd10_accuracy(epoch: int) -> float:
        acc = reports[epoch][EvalTask.ICD10].accuracy
        return -math.inf if acc is None else acc

    best_epoch = max(trained, key=lambda e: (icd10_accuracy(e), -e))
    return CheckpointComparison(
        best_epoch=best_epoch, base=dict(reports[0]), best=dict(reports[best_epoch])
    )


def evaluate_task(
    cases: Sequence[TestCase],
    task: EvalTask,
    templates: Sequence[Template],
    cfg: EndpointConfig,
    seed: int,
    thinking_delimiter: str | None = DEFAULT_THINKING_DELIMITER,
    fixed_formulation: int | None = None,
) -> tuple[list[TranscriptRow], EvalReport]:
    """Build questions, query the endpoint, score: the full loop for one task."""
    questions = build_questions(
        cases,
        task,
        templates,
        seed,
        short_answer_instruction=cfg.short_answer_instruction,
        fixed_formulation=fixed_formulation,
    )
    transcript = query_endpoint(questions, cfg)
    report = score(transcript, cases, task, thinking_delimiter=thinking_delimiter)
    return transcript, report
