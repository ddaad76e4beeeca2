"""Catalogue ingestion: read code/text tables into a normalized in-memory model.

The canonical input format is UTF-8 TSV with a header row and `code` / `text`
columns. Other delimited layouts (the official distributions are pipe-separated
and partly header-less) are ingested by pointing the column map at the right
delimiter and columns; `write_canonical_tsv` turns any loaded catalogue back
into the canonical form.

Rows are never silently dropped: every input row ends up either as an entry or
in the per-file rejects list (grammar failure, empty text, duplicate), so
`row_count == entry_count + len(rejects)` holds for every loaded file.
"""

from __future__ import annotations

import csv
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path

from .codes import CodeError, CodeSystem, ParsedCode, is_tumor_icd10, parse_code

log = logging.getLogger(__name__)


class CatalogError(Exception):
    """Fatal ingestion problem: unreadable file, bad column map, no valid rows."""


@dataclass(frozen=True, slots=True)
class ColumnMap:
    """Where to find the code and text columns in a delimited file.

    Columns are header names when the file has a header, zero-based indices
    otherwise. For ICD-10-GM files the tumor flag is always derived from the
    code range, never read from a column.
    """

    code_column: str | int = "code"
    text_column: str | int = "text"
    delimiter: str = "\t"
    has_header: bool = True


@dataclass(frozen=True, slots=True)
class RejectedRow:
    row_number: int
    code: str
    text: str
    reason: str


@dataclass(frozen=True, slots=True)
class CatalogEntry:
    entry_id: str
    system: CodeSystem
    code: str
    text: str
    parsed: ParsedCode
    is_tumor: bool = False


@dataclass(frozen=True, slots=True)
class SourceInfo:
    path: str
    row_count: int
    entry_count: int
    distinct_codes: int
    rejects: tuple[RejectedRow, ...] = ()

    def as_dict(self) -> dict:
        return {
            "path": self.path,
            "row_count": self.row_count,
            "entry_count": self.entry_count,
            "distinct_codes": self.distinct_codes,
            "reject_count": len(self.rejects),
            "rejects": [
                {"row": r.row_number, "code": r.code, "text": r.text, "reason": r.reason}
                for r in self.rejects
            ],
        }


@dataclass(frozen=True)
class Catalog:
    """Immutable set of validated catalogue entries plus per-file bookkeeping."""

    entries: tuple[CatalogEntry, ...]
    source_manifest: dict[CodeSystem, SourceInfo] = field(default_factory=dict)

    def select(
        self, system: CodeSystem | None = None, is_tumor: bool | None = None
    ) -> tuple[CatalogEntry, ...]:
        return tuple(
            e
            for e in self.entries
            if (system is None or e.system is system)
            and (is_tumor is None or e.is_tumor == is_tumor)
        )

    def manifest_dict(self) -> dict:
        return {system.value: info.as_dict() for system, info in self.source_manifest.items()}

    def __len__(self) -> int:
        return len(self.entries)


def _resolve_column(header: list[str] | None, column: str | int, what: str) -> int:
    if isinstance(column, int):
        return column
    if header is None:
        raise CatalogError(f"{what} column {column!r} requires a header row")
    try:
        return header.index(column)
    except ValueError:
        raise CatalogError(f"{what} column {column!r} not found in header {header}") from None


def load_catalog(path: str | Path, system: CodeSystem, column_map: ColumnMap | None = None) -> Catalog:
    """Load one catalogue file, validating every code against its grammar.

    Raises CatalogError when the file is unreadable, the column map points at
    absent columns, or no row survives validation.
    """
    column_map = column_map or ColumnMap()
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CatalogError(f"cannot read catalogue file {path}: {exc}") from exc

    rows = list(csv.reader(raw.splitlines(), delimiter=column_map.delimiter))
    header: list[str] | None = None
    if column_map.has_header:
        if not rows:
            raise CatalogError(f"zero valid rows in {path}: file is empty")
        header = [h.strip() for h in rows[0]]
        rows = rows[1:]
    code_idx = _resolve_column(header, column_map.code_column, "code")
    text_idx = _resolve_column(header, column_map.text_column, "text")

    entries: list[CatalogEntry] = []
    rejects: list[RejectedRow] = []
    seen: set[tuple[str, str]] = set()
    for row_number, row in enumerate(rows, start=2 if column_map.has_header else 1):
        if not any(cell.strip() for cell in row):
            continue
        if len(row) <= max(code_idx, text_idx):
            rejects.append(RejectedRow(row_number, "", "", "too few columns"))
            continue
        code_raw = row[code_idx].strip()
        text = row[text_idx].strip()
        if not text:
            rejects.append(RejectedRow(row_number, code_raw, text, "empty text"))
            continue
        try:
            parsed = parse_code(code_raw, system)
        except CodeError as exc:
            rejects.append(RejectedRow(row_number, code_raw, text, exc.reason))
            continue
        key = (parsed.normalized, text)
        if key in seen:
            rejects.append(RejectedRow(row_number, code_raw, text, "duplicate (code, text) pair"))
            continue
        seen.add(key)
        entries.append(
            CatalogEntry(
                entry_id=f"{system.value}:{row_number:06d}",
                system=system,
                code=code_raw,
                text=text,
                parsed=parsed,
                is_tumor=is_tumor_icd10(parsed) if system is CodeSystem.ICD10GM else False,
            )
        )

    if not entries:
        raise CatalogError(f"zero valid rows in {path}")

    info = SourceInfo(
        path=str(path),
        row_count=len(entries) + len(rejects),
        entry_count=len(entries),
        distinct_codes=len({e.parsed.normalized for e in entries}),
        rejects=tuple(rejects),
    )
    log.info(
        "loaded %s: %d entries, %d rejects, %d distinct codes",
        path,
        info.entry_count,
        len(rejects),
        info.distinct_codes,
    )
    return Catalog(entries=tuple(entries), source_manifest={system: info})


def merge_catalogs(*catalogs: Catalog) -> Catalog:
    """Concatenate catalogues loaded from different files."""
    entries: list[CatalogEntry] = []
    manifest: dict[CodeSystem, SourceInfo] = {}
    for cat in catalogs:
        entries.extend(cat.entries)
        for system, info in cat.source_manifest.items():
            if system in manifest:
                raise CatalogError(f"duplicate source for system {system.value}")
            manifest[system] = info
    return Catalog(entries=tuple(entries), source_manifest=manifest)


def _derived(entries: tuple[CatalogEntry, ...], parent: Catalog) -> Catalog:
    manifest = {
        system: SourceInfo(
            path=parent.source_manifest[system].path if system in parent.source_manifest else "derived",
            row_count=count,
            entry_count=count,
            distinct_codes=len({e.parsed.normalized for e in entries if e.system is system}),
        )
        for system, count in _counts_by_system(entries).items()
    }
    return Catalog(entries=entries, source_manifest=manifest)


def _counts_by_system(entries: tuple[CatalogEntry, ...]) -> dict[CodeSystem, int]:
    counts: dict[CodeSystem, int] = {}
    for e in entries:
        counts[e.system] = counts.get(e.system, 0) + 1
    return counts


def filter_tumor(catalog: Catalog) -> Catalog:
    """Keep only entries whose code lies in the ICD-10 tumor block."""
    kept = tuple(e for e in catalog.entries if e.is_tumor)
    log.info("filter_tumor: kept %d of %d entries", len(kept), len(catalog.entries))
    return _derived(kept, catalog)


def sample_negatives(catalog: Catalog, n: int, seed: int) -> Catalog:
    """Seeded uniform sample without replacement of n non-tumor ICD-10-GM entries.

    The result preserves catalogue order regardless of draw order, so the same
    seed always yields the same catalogue, byte for byte.
    """
    pool = catalog.select(system=CodeSystem.ICD10GM, is_tumor=False)
    if n > len(pool):
        raise ValueError(f"cannot sample {n} negatives from {len(pool)} non-tumor entries")
    indices = sorted(random.Random(seed).sample(range(len(pool)), n))
    return _derived(tuple(pool[i] for i in indices), catalog)


def write_canonical_tsv(catalog: Catalog, path: str | Path) -> None:
    """Write entries in the canonical TSV layout (code, text, is_tumor)."""
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["code", "text", "is_tumor"])
        for e in catalog.entries:
            writer.writerow([e.parsed.normalized, e.text, int(e.is_tumor)])
