"""Data-quality analysis for coded diagnosis descriptions.

Two raters judge, per case and code system, whether the gold code is fully,
partially or not derivable from the description text alone. This module
computes chance-corrected inter-rater agreement (Cohen's kappa), tabulates the
consensus judgments with exact binomial confidence intervals, and derives the
performance ceilings those shares imply: exact accuracy is bounded by the
fully-derivable share, partial accuracy by fully + partially.

Annotation TSV columns: case_id, rater_id, icd10_derivability,
icdo_derivability, reason. The consensus file is identical minus rater_id.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Hashable, Sequence

from scipy.stats import beta


class QualityError(Exception):
    """Invalid annotation data or undefined statistic."""


class Derivability(str, Enum):
    FULLY = "fully"
    PARTIALLY = "partially"
    NOT = "not"


class Reason(str, Enum):
    MISSING_BEHAVIOR = "missing_behavior"
    MISSING_LOCALIZATION = "missing_localization"
    OTHER = "other"
    NONE = "none"


class RatedSystem(str, Enum):
    ICD10 = "icd10"
    ICDO = "icdo"


@dataclass(frozen=True, slots=True)
class AnnotationRecord:
    case_id: str
    rater_id: str
    icd10_derivability: Derivability
    icdo_derivability: Derivability
    reason: Reason

    def __post_init__(self) -> None:
        fully_both = (
            self.icd10_derivability is Derivability.FULLY
            and self.icdo_derivability is Derivability.FULLY
        )
        if fully_both != (self.reason is Reason.NONE):
            raise QualityError(
                f"case {self.case_id}: reason must be 'none' exactly when both "
                f"codes are fully derivable"
            )

    def derivability(self, system: RatedSystem) -> Derivability:
        return (
            self.icd10_derivability if system is RatedSystem.ICD10 else self.icdo_derivability
        )


def cohen_kappa(ratings_a: Sequence[Hashable], ratings_b: Sequence[Hashable]) -> float:
    """Unweighted Cohen's kappa: (p_o - p_e) / (1 - p_e).

    p_o is the observed agreement rate, p_e the chance agreement from the
    raters' marginal distributions. Degenerate case: when p_e is 1 the
    statistic is defined only for perfect agreement.
    """
    if len(ratings_a) != len(ratings_b):
        raise QualityError(f"rating lists differ in length: {len(ratings_a)} vs {len(ratings_b)}")
    n = len(ratings_a)
    if n == 0:
        raise QualityError("kappa needs at least one rating pair")
    p_o = sum(a == b for a, b in zip(ratings_a, ratings_b)) / n
    marg_a = Counter(ratings_a)
    marg_b = Counter(ratings_b)
    p_e = sum(marg_a[c] * marg_b.get(c, 0) for c in marg_a) / (n * n)
    if p_e >= 1.0 - 1e-12:
        if p_o >= 1.0 - 1e-12:
            return 1.0
        raise QualityError("kappa undefined: chance agreement is 1 but raters disagree")
    return (p_o - p_e) / (1.0 - p_e)


def exact_binomial_ci(successes: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson exact confidence interval for a binomial proportion.

    Bounds come from the beta quantiles that invert the regularized incomplete
    beta function; the boundary cases pin lower=0 at x=0 and upper=1 at x=n.
    """
    if not 0 <= successes <= n or n <= 0:
        raise QualityError(f"need 0 <= successes <= n, got {successes}/{n}")
    if not 0 < level < 1:
        raise QualityError(f"confidence level must lie in (0, 1), got {level}")
    alpha = 1.0 - level
    lower = 0.0 if successes == 0 else float(beta.ppf(alpha / 2, successes, n - successes + 1))
    upper = 1.0 if successes == n else float(beta.ppf(1 - alpha / 2, successes + 1, n - successes))
    return lower, upper


def _pct(fraction: float) -> int:
    """Integer percent, half-up, as used for display."""
    return math.floor(fraction * 100 + 0.5)


@dataclass(frozen=True)
class DerivabilityReport:
    system: RatedSystem
    n: int
    counts: dict[Derivability, int]
    cis: dict[Derivability, tuple[float, float]]
    ceiling_exact: float
    ceiling_partial: float
    level: float

    def percentage(self, category: Derivability) -> float:
        return 100.0 * self.counts[category] / self.n

    def cell(self, category: Derivability) -> str:
        lo, hi = self.cis[category]
        return f"{_pct(self.counts[category] / self.n)} ({_pct(lo)}–{_pct(hi)})"

    def row(self) -> str:
        return " ".join(self.cell(c) for c in Derivability)

    def as_dict(self) -> dict:
        return {
            "system": self.system.value,
            "n": self.n,
            "level": self.level,
            "categories": {
                c.value: {
                    "count": self.counts[c],
                    "percentage": self.percentage(c),
                    "ci_lower": self.cis[c][0],
                    "ci_upper": self.cis[c][1],
                }
                for c in Derivability
            },
            "ceiling_exact_pct": self.ceiling_exact,
            "ceiling_partial_pct": self.ceiling_partial,
        }


def derivability_report(
    consensus: Sequence[AnnotationRecord],
    system: RatedSystem,
    level: float = 0.95,
) -> DerivabilityReport:
    """Tabulate consensus derivability judgments for one code system."""
    if not consensus:
        raise QualityError("consensus list is empty")
    ids = [r.case_id for r in consensus]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise QualityError(f"duplicate case_ids in consensus: {dupes}")
    n = len(consensus)
    counts = {c: 0 for c in Derivability}
    for record in consensus:
        counts[record.derivability(system)] += 1
    cis = {c: exact_binomial_ci(counts[c], n, level) for c in Derivability}
    fully = 100.0 * counts[Derivability.FULLY] / n
    partial = 100.0 * (counts[Derivability.FULLY] + counts[Derivability.PARTIALLY]) / n
    return DerivabilityReport(
        system=system,
        n=n,
        counts=counts,
        cis=cis,
        ceiling_exact=fully,
        ceiling_partial=partial,
        level=level,
    )


@dataclass(frozen=True, slots=True)
class AgreementSummary:
    n: int
    kappa_icd10: float
    kappa_icdo: float
    kappa_reason: float

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "kappa_icd10_derivability": self.kappa_icd10,
            "kappa_icdo_derivability": self.kappa_icdo,
            "kappa_reason": self.kappa_reason,
        }


def agreement_summary(
    a: Sequence[AnnotationRecord], b: Sequence[AnnotationRecord]
) -> AgreementSummary:
    """Kappas for the two derivability judgments and the reason attribution.

    The two record lists must cover exactly the same case_ids; records are
    aligned by case_id before comparison.
    """
    ids_a = {r.case_id for r in a}
    ids_b = {r.case_id for r in b}
    if len(ids_a) != len(a) or len(ids_b) != len(b):
        raise QualityError("duplicate case_ids within one rater's records")
    if ids_a != ids_b:
        missing = sorted(ids_a ^ ids_b)
        raise QualityError(f"raters cover different case_ids, e.g. {missing[:5]}")
    sorted_a = sorted(a, key=lambda r: r.case_id)
    sorted_b = sorted(b, key=lambda r: r.case_id)
    return AgreementSummary(
        n=len(sorted_a),
        kappa_icd10=cohen_kappa(
            [r.icd10_derivability for r in sorted_a], [r.icd10_derivability for r in sorted_b]
        ),
        kappa_icdo=cohen_kappa(
            [r.icdo_derivability for r in sorted_a], [r.icdo_derivability for r in sorted_b]
        ),
        kappa_reason=cohen_kappa(
            [r.reason for r in sorted_a], [r.reason for r in sorted_b]
        ),
    )


def load_annotation_tsv(path: str | Path, consensus: bool = False) -> list[AnnotationRecord]:
    """Read rater annotations (or a consensus file without rater_id) from TSV."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise QualityError(f"cannot read annotation file {path}: {exc}") from exc
    rows = list(csv.DictReader(text.splitlines(), delimiter="\t"))
    required = {"case_id", "icd10_derivability", "icdo_derivability", "reason"}
    if not consensus:
        required = required | {"rater_id"}
    if not rows or not required.issubset(rows[0].keys()):
        raise QualityError(f"{path}: annotation TSV needs columns {sorted(required)}")
    records = []
    for row in rows:
        try:
            records.append(
                AnnotationRecord(
                    case_id=row["case_id"].strip(),
                    rater_id="consensus" if consensus else row["rater_id"].strip(),
                    icd10_derivability=Derivability(row["icd10_derivability"].strip().lower()),
                    icdo_derivability=Derivability(row["icdo_derivability"].strip().lower()),
                    reason=Reason(row["reason"].strip().lower()),
                )
            )
        except ValueError as exc:
            raise QualityError(f"{path}: bad annotation row {row}: {exc}") from exc
    return records


def split_raters(records: Sequence[AnnotationRecord]) -> dict[str, list[AnnotationRecord]]:
    by_rater: dict[str, list[AnnotationRecord]] = {}
    for record in records:
        by_rater.setdefault(record.rater_id, []).append(record)
    return by_rater
