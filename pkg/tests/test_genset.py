from __future__ import annotations

import hashlib
import json

import pytest
from hypothesis import given, settings, strategies as st

from onkoqa.codes import CodeSystem, ExtractionStatus, YesNo, extract_code, extract_yes_no
from onkoqa.genset import (
    GenerationError,
    TaskStats,
    DatasetManifest,
    assemble_dataset,
    generate_task,
    verify_manifest,
)
from onkoqa.templates import FORMULATION_COUNTS, TaskKind

from conftest import (
    build_entries,
    make_morph_codes,
    make_nontumor_codes,
    make_ops_codes,
    make_topo_codes,
    make_tumor_codes,
)


def _pool(task: TaskKind, n_tumor: int = 4, n_other: int = 4):
    if task in (TaskKind.ICD10_CODE,):
        return build_entries(CodeSystem.ICD10GM, make_tumor_codes(n_tumor), "Tumor")
    if task in (TaskKind.RECOGNIZE_YN, TaskKind.RECOGNIZE_YN_CODE):
        return build_entries(CodeSystem.ICD10GM, make_tumor_codes(n_tumor), "Tumor") + build_entries(
            CodeSystem.ICD10GM, make_nontumor_codes(n_tumor), "Sonstige"
        )
    if task in (TaskKind.OPS_MAIN_CATEGORY, TaskKind.OPS_RECOGNIZE):
        return build_entries(CodeSystem.OPS, make_ops_codes(n_other), "Prozedur")
    if task is TaskKind.ICDO_MORPHOLOGY:
        return build_entries(CodeSystem.ICDO3_MORPHOLOGY, make_morph_codes(n_other), "Histologie")
    return build_entries(CodeSystem.ICDO3_TOPOGRAPHY, make_topo_codes(n_other), "Lokalisation")


@pytest.mark.parametrize("task", list(TaskKind))
def test_count_identity(task, templates):
    entries = _pool(task)
    pairs = generate_task(task, entries, templates[task], seed=1)
    assert len(pairs) == FORMULATION_COUNTS[task] * len(entries)
    assert len({(p.source_entry, p.formulation_id) for p in pairs}) == len(pairs)


def test_recognize_yn_two_entries(templates):
    entries = build_entries(CodeSystem.ICD10GM, ["C64"], "Tumor") + build_entries(
        CodeSystem.ICD10GM, ["E11.9"], "Sonstige"
    )
    pairs = generate_task(TaskKind.RECOGNIZE_YN, entries, templates[TaskKind.RECOGNIZE_YN], seed=1)
    assert len(pairs) == 12  # 2 entries x 6 formulations
    ja = [p for p in pairs if p.answer.startswith("Ja")]
    nein = [p for p in pairs if p.answer.startswith("Nein")]
    assert len(ja) == len(nein) == 6


def test_zero_entries_gives_empty_list(templates):
    assert generate_task(TaskKind.ICD10_CODE, (), templates[TaskKind.ICD10_CODE], seed=1) == []


def test_unbalanced_recognition_pool_rejected(templates):
    entries = build_entries(CodeSystem.ICD10GM, make_tumor_codes(3), "Tumor") + build_entries(
        CodeSystem.ICD10GM, make_nontumor_codes(2), "Sonstige"
    )
    with pytest.raises(GenerationError, match="balanced"):
        generate_task(TaskKind.RECOGNIZE_YN, entries, templates[TaskKind.RECOGNIZE_YN], seed=1)


def test_wrong_system_pool_rejected(templates):
    entries = build_entries(CodeSystem.OPS, make_ops_codes(2), "Prozedur")
    with pytest.raises(GenerationError, match="expects"):
        generate_task(TaskKind.ICD10_CODE, entries, templates[TaskKind.ICD10_CODE], seed=1)


def test_missing_templates_rejected(templates):
    entries = _pool(TaskKind.ICD10_CODE)
    with pytest.raises(GenerationError, match="formulations"):
        generate_task(TaskKind.ICD10_CODE, entries, templates[TaskKind.ICD10_CODE][:-1], seed=1)


@pytest.mark.parametrize("task", list(TaskKind))
def test_answer_shape_and_roundtrip(task, templates):
    """Every generated answer is short, single-line, and extraction recovers gold."""
    entries = _pool(task, n_tumor=6, n_other=6)
    pairs = generate_task(task, entries, templates[task], seed=3)
    system = {
        TaskKind.ICD10_CODE: CodeSystem.ICD10GM,
        TaskKind.RECOGNIZE_YN_CODE: CodeSystem.ICD10GM,
        TaskKind.OPS_MAIN_CATEGORY: CodeSystem.OPS,
        TaskKind.ICDO_MORPHOLOGY: CodeSystem.ICDO3_MORPHOLOGY,
        TaskKind.ICDO_TOPOGRAPHY: CodeSystem.ICDO3_TOPOGRAPHY,
    }.get(task)
    for p in pairs:
        assert "\n" not in p.answer and len(p.answer) <= 120
        if p.gold_code is not None:
            assert p.gold_code in p.answer
            outcome = extract_code(p.answer, system)
            assert outcome.status is ExtractionStatus.VALID
            assert outcome.code.normalized == p.gold_code
        if p.gold_yn is not None:
            assert p.answer.startswith("Ja") or p.answer.startswith("Nein")
            verdict = extract_yes_no(p.answer)
            assert verdict is (YesNo.YES if p.gold_yn else YesNo.NO)


def test_assemble_deterministic_and_permutation(templates, tmp_path):
    entries = _pool(TaskKind.ICD10_CODE, n_tumor=5)
    pairs = generate_task(TaskKind.ICD10_CODE, entries, templates[TaskKind.ICD10_CODE], seed=2)

    def run(path):
        return assemble_dataset([pairs], seed=42, out=path)

    out_a, out_b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    manifest_a = run(out_a)
    run(out_b)
    assert hashlib.sha256(out_a.read_bytes()).hexdigest() == hashlib.sha256(out_b.read_bytes()).hexdigest()

    lines = out_a.read_text(encoding="utf-8").splitlines()
    assert len(lines) == len(pairs)
    questions = sorted(json.loads(l)["messages"][0]["content"] for l in lines)
    assert questions == sorted(p.question for p in pairs)  # shuffle is a permutation
    assert manifest_a.total == len(pairs)
    assert manifest_a.seed == 42


def test_assemble_different_seed_changes_order(templates, tmp_path):
    entries = _pool(TaskKind.ICD10_CODE, n_tumor=5)
    pairs = generate_task(TaskKind.ICD10_CODE, entries, templates[TaskKind.ICD10_CODE], seed=2)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assemble_dataset([pairs], seed=1, out=a)
    assemble_dataset([pairs], seed=2, out=b)
    assert a.read_bytes() != b.read_bytes()


def test_assemble_empty_errors(tmp_path):
    with pytest.raises(GenerationError, match="empty"):
        assemble_dataset([[]], seed=0, out=tmp_path / "x.jsonl")


def test_jsonl_schema(templates, tmp_path):
    entries = _pool(TaskKind.RECOGNIZE_YN_CODE, n_tumor=2)
    pairs = generate_task(
        TaskKind.RECOGNIZE_YN_CODE, entries, templates[TaskKind.RECOGNIZE_YN_CODE], seed=2
    )
    out = tmp_path / "d.jsonl"
    assemble_dataset([pairs], seed=0, out=out)
    for line in out.read_text(encoding="utf-8").splitlines():
        obj = json.loads(line)
        assert [m["role"] for m in obj["messages"]] == ["user", "assistant"]
        assert obj["meta"]["task"] == "recognize_yn_code"
        assert isinstance(obj["meta"]["gold_yn"], bool)


@settings(max_examples=25, deadline=None)
@given(n_entries=st.integers(1, 8), seed=st.integers(0, 10))
def test_count_identity_property(n_entries, seed):
    from onkoqa.templates import load_templates

    templates = load_templates()
    entries = build_entries(CodeSystem.ICDO3_TOPOGRAPHY, make_topo_codes(n_entries), "Ort")
    pairs = generate_task(TaskKind.ICDO_TOPOGRAPHY, entries, templates[TaskKind.ICDO_TOPOGRAPHY], seed)
    assert len(pairs) == 10 * n_entries


# ---------------------------------------------------------------- verification

def _manifest_from_counts(counts: dict[TaskKind, tuple[int, int]]) -> DatasetManifest:
    total = sum(c for c, _ in counts.values())
    return DatasetManifest(
        total=total,
        seed=0,
        duplicate_count=0,
        tasks={
            task.value: TaskStats(
                count=count,
                formulations=FORMULATION_COUNTS[task],
                entries=entries,
                proportion=count / total,
            )
            for task, (count, entries) in counts.items()
        },
    )


_REFERENCE_COUNTS = {
    TaskKind.ICD10_CODE: (163_200, 13_600),
    TaskKind.RECOGNIZE_YN: (163_200, 27_200),
    TaskKind.RECOGNIZE_YN_CODE: (108_800, 27_200),
    TaskKind.OPS_MAIN_CATEGORY: (29_640, 2_964),
    TaskKind.OPS_RECOGNIZE: (11_856, 2_964),
    TaskKind.ICDO_MORPHOLOGY: (28_040, 2_804),
    TaskKind.ICDO_TOPOGRAPHY: (13_380, 1_338),
}


def test_verify_manifest_reference_counts_pass():
    report = verify_manifest(_manifest_from_counts(_REFERENCE_COUNTS))
    assert report.ok
    assert "all rows pass" in report.render()


def test_verify_manifest_detects_missing_pair():
    counts = dict(_REFERENCE_COUNTS)
    counts[TaskKind.ICDO_TOPOGRAPHY] = (13_379, 1_338)
    report = verify_manifest(_manifest_from_counts(counts))
    assert not report.ok
    rendered = report.render()
    assert "total" in rendered and "13379" in rendered


def test_verify_manifest_vacuous_on_empty_spec():
    manifest = _manifest_from_counts(_REFERENCE_COUNTS)
    report = verify_manifest(manifest, expected_rows=(), expected_total=None)
    assert report.ok and report.rows == []
