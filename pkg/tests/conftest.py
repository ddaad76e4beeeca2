from __future__ import annotations

import pytest

from onkoqa.catalog import CatalogEntry
from onkoqa.codes import CodeSystem, parse_code
from onkoqa.templates import load_templates


def make_tumor_codes(n: int) -> list[str]:
    """Distinct-ish ICD-10 codes inside the tumor block C00..D48.9."""
    codes = []
    for i in range(n):
        block = i % 2
        if block == 0:
            codes.append(f"C{(i // 10) % 100:02d}.{i % 10}")
        else:
            codes.append(f"D{(i // 10) % 49:02d}.{i % 10}")
    return codes


def make_nontumor_codes(n: int) -> list[str]:
    codes = []
    letters = "EFGIJK"
    for i in range(n):
        letter = letters[i % len(letters)]
        codes.append(f"{letter}{(i // 10) % 100:02d}.{i % 10}")
    return codes


def make_topo_codes(n: int) -> list[str]:
    return [f"C{(i // 10) % 81:02d}.{i % 10}" for i in range(n)]


def make_morph_codes(n: int) -> list[str]:
    behaviors = "012369"
    return [f"{8000 + i % 2000:04d}/{behaviors[i % 6]}" for i in range(n)]


def make_ops_codes(n: int) -> list[str]:
    chapters = "135689"
    return [f"{chapters[i % 6]}-{10 + i % 90:02d}{i % 10}.{i % 100:02d}" for i in range(n)]


def build_entries(
    system: CodeSystem, codes: list[str], text_prefix: str
) -> tuple[CatalogEntry, ...]:
    """Construct catalogue entries directly, with unique diagnosis texts."""
    entries = []
    for i, code in enumerate(codes):
        parsed = parse_code(code, system)
        entries.append(
            CatalogEntry(
                entry_id=f"{system.value}:{text_prefix}:{i:06d}",
                system=system,
                code=code,
                text=f"{text_prefix} Beschreibung Nr. {i:06d}",
                parsed=parsed,
                is_tumor=(system is CodeSystem.ICD10GM and "C00" <= parsed.category3 <= "D48"),
            )
        )
    return tuple(entries)


@pytest.fixture(scope="session")
def templates():
    return load_templates()


@pytest.fixture(scope="session")
def all_templates(templates):
    return [t for group in templates.values() for t in group]
