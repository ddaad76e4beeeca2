from __future__ import annotations

import pytest

from onkoqa.catalog import (
    Catalog,
    CatalogError,
    ColumnMap,
    filter_tumor,
    load_catalog,
    merge_catalogs,
    sample_negatives,
    write_canonical_tsv,
)
from onkoqa.codes import CodeSystem, parse_code

from conftest import build_entries, make_nontumor_codes, make_tumor_codes


def _write_tsv(path, rows, header=("code", "text")):
    lines = ["\t".join(header)] + ["\t".join(r) for r in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def test_load_three_row_catalogue(tmp_path):
    path = tmp_path / "alpha.tsv"
    _write_tsv(
        path,
        [
            ("C64", "Nierentumor der rechten Niere"),
            ("D30.0", "Gutartige Neubildung der Niere"),
            ("D41.0", "Neubildung unsicheren Verhaltens der Niere"),
        ],
    )
    cat = load_catalog(path, CodeSystem.ICD10GM)
    assert len(cat) == 3
    assert [e.parsed.normalized for e in cat.entries] == ["C64", "D30.0", "D41.0"]
    assert all(e.is_tumor for e in cat.entries)
    info = cat.source_manifest[CodeSystem.ICD10GM]
    assert info.row_count == 3
    assert info.distinct_codes == 3


def test_load_empty_file_errors(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    with pytest.raises(CatalogError, match="zero valid rows"):
        load_catalog(path, CodeSystem.ICD10GM)


def test_load_header_only_errors(tmp_path):
    path = tmp_path / "header.tsv"
    _write_tsv(path, [])
    with pytest.raises(CatalogError, match="zero valid rows"):
        load_catalog(path, CodeSystem.ICD10GM)


def test_bad_code_goes_to_rejects(tmp_path):
    path = tmp_path / "alpha.tsv"
    _write_tsv(path, [("C64", "Tumor"), ("XYZ", "Kaputt"), ("D30.0", "Gutartig")])
    cat = load_catalog(path, CodeSystem.ICD10GM)
    assert len(cat) == 2
    rejects = cat.source_manifest[CodeSystem.ICD10GM].rejects
    assert len(rejects) == 1
    assert rejects[0].code == "XYZ"
    assert "letter" in rejects[0].reason


def test_missing_file_errors(tmp_path):
    with pytest.raises(CatalogError, match="cannot read"):
        load_catalog(tmp_path / "nope.tsv", CodeSystem.ICD10GM)


def test_missing_column_errors(tmp_path):
    path = tmp_path / "alpha.tsv"
    _write_tsv(path, [("C64", "Tumor")], header=("kode", "text"))
    with pytest.raises(CatalogError, match="code.*column"):
        load_catalog(path, CodeSystem.ICD10GM)


def test_lossless_modulo_rejects(tmp_path):
    path = tmp_path / "alpha.tsv"
    rows = [
        ("C64", "Tumor A"),
        ("BAD", "Kaputt"),
        ("C64", "Tumor A"),  # duplicate pair
        ("D30.0", ""),  # empty text
        ("C50.1", "Tumor B"),
    ]
    _write_tsv(path, rows)
    cat = load_catalog(path, CodeSystem.ICD10GM)
    info = cat.source_manifest[CodeSystem.ICD10GM]
    assert info.row_count == len(rows)
    assert info.row_count == info.entry_count + len(info.rejects)
    reasons = sorted(r.reason for r in info.rejects)
    assert any("duplicate" in r for r in reasons)
    assert any("empty text" in r for r in reasons)


def test_custom_column_map_positional(tmp_path):
    path = tmp_path / "official.txt"
    path.write_text("1|12345|C64|Nierenkarzinom\n1|12346|D30.0|Nierenadenom\n", encoding="utf-8")
    cat = load_catalog(
        path,
        CodeSystem.ICD10GM,
        ColumnMap(code_column=2, text_column=3, delimiter="|", has_header=False),
    )
    assert [e.parsed.normalized for e in cat.entries] == ["C64", "D30.0"]


def test_filter_tumor_boundaries():
    entries = build_entries(
        CodeSystem.ICD10GM, ["C64", "D48.9", "D50.0", "I25.1", "D30.0"], "Diagnose"
    )
    cat = Catalog(entries=entries)
    kept = filter_tumor(cat)
    assert [e.parsed.normalized for e in kept.entries] == ["C64", "D48.9", "D30.0"]
    again = filter_tumor(kept)
    assert again.entries == kept.entries  # idempotent


def test_sample_negatives_deterministic():
    entries = build_entries(CodeSystem.ICD10GM, make_nontumor_codes(50), "Sonstige")
    cat = Catalog(entries=entries)
    a = sample_negatives(cat, 20, seed=7)
    b = sample_negatives(cat, 20, seed=7)
    assert [e.entry_id for e in a.entries] == [e.entry_id for e in b.entries]
    c = sample_negatives(cat, 20, seed=8)
    assert [e.entry_id for e in c.entries] != [e.entry_id for e in a.entries]


def test_sample_negatives_exhaustive_keeps_order():
    entries = build_entries(CodeSystem.ICD10GM, make_nontumor_codes(10), "Sonstige")
    cat = Catalog(entries=entries)
    sampled = sample_negatives(cat, 10, seed=1)
    assert sampled.entries == entries


def test_sample_negatives_too_many():
    entries = build_entries(CodeSystem.ICD10GM, make_nontumor_codes(5), "Sonstige")
    with pytest.raises(ValueError, match="cannot sample"):
        sample_negatives(Catalog(entries=entries), 6, seed=0)


def test_sample_negatives_full_scale_pool():
    entries = build_entries(CodeSystem.ICD10GM, make_nontumor_codes(20_000), "Sonstige")
    sampled = sample_negatives(Catalog(entries=entries), 13_600, seed=42)
    ids = {e.entry_id for e in sampled.entries}
    assert len(sampled.entries) == 13_600
    assert len(ids) == 13_600


def test_roundtrip_canonical_tsv(tmp_path):
    entries = build_entries(
        CodeSystem.ICD10GM, make_tumor_codes(5) + make_nontumor_codes(5), "Diagnose"
    )
    cat = Catalog(entries=entries)
    out = tmp_path / "canonical.tsv"
    write_canonical_tsv(cat, out)
    reloaded = load_catalog(out, CodeSystem.ICD10GM)
    assert [e.parsed.normalized for e in reloaded.entries] == [
        e.parsed.normalized for e in cat.entries
    ]
    assert [e.is_tumor for e in reloaded.entries] == [e.is_tumor for e in cat.entries]


def test_reparse_roundtrip_property(tmp_path):
    path = tmp_path / "alpha.tsv"
    _write_tsv(path, [("c64.-", "Klein geschrieben"), ("D30.0", "Normal")])
    cat = load_catalog(path, CodeSystem.ICD10GM)
    for e in cat.entries:
        assert parse_code(e.parsed.normalized, e.system) == e.parsed


def test_merge_catalogs_rejects_same_system_twice(tmp_path):
    path = tmp_path / "a.tsv"
    _write_tsv(path, [("C64", "Tumor")])
    a = load_catalog(path, CodeSystem.ICD10GM)
    with pytest.raises(CatalogError, match="duplicate source"):
        merge_catalogs(a, a)
