"""Grammars, validation and free-text extraction for the four code systems.

Accepted shapes (after normalization: uppercase, trimmed, trailing placeholder
dots/dashes and the GM marker characters dagger/asterisk/exclamation removed):

    ICD10GM            LETTER DIGIT DIGIT [ "." DIGIT [DIGIT] ]      e.g. C83.3, D48.9
    ICDO3_TOPOGRAPHY   "C" DIGIT DIGIT [ "." DIGIT ]                 category C00..C80
    ICDO3_MORPHOLOGY   DIGIT{4} "/" BEHAVIOR                         histology 8000..9999,
                                                                     behavior 0|1|2|3|6|9
    OPS                CHAPTER "-" DIGIT DIGIT [ DIGIT [ "." DIGIT [DIGIT] ] ]
                                                                     chapter 1|3|5|6|8|9

Shape violations and range violations raise distinct error types so that
callers can report why a code was rejected. Extraction from free text scans
left to right and returns the first candidate that parses in-range for the
expected system; everything else is an INVALID outcome, never an exception.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum

MORPHOLOGY_BEHAVIOR_DIGITS = frozenset("012369")
OPS_CHAPTERS = frozenset("135689")

# Catalogue editions stop at 9993 but the grammar's default stays at the full
# four-digit band; pass histology_max=9993 for the stricter catalogue bound.
DEFAULT_HISTOLOGY_MAX = 9999


class CodeSystem(str, Enum):
    """The four code systems handled by this toolkit."""

    ICD10GM = "icd10gm"
    ICDO3_TOPOGRAPHY = "icdo3_topography"
    ICDO3_MORPHOLOGY = "icdo3_morphology"
    OPS = "ops"


class CodeError(ValueError):
    """Base class for code validation failures."""

    def __init__(self, raw: str, system: CodeSystem, reason: str) -> None:
        super().__init__(f"{system.value}: {reason}: {raw!r}")
        self.raw = raw
        self.system = system
        self.reason = reason


class CodeShapeError(CodeError):
    """The string does not match the system's grammar at all."""


class CodeRangeError(CodeError):
    """The string has the right shape but lies outside the accepted range."""


@dataclass(frozen=True, slots=True)
class ParsedCode:
    """A validated, normalized code.

    `normalized` round-trips through `parse_code`. `category3` is the
    three-character category for ICD-10-GM and ICD-O topography; for the
    other systems it holds the analogous partial-match key (the four-digit
    histology for morphology, chapter plus two-digit group for OPS).
    """

    system: CodeSystem
    normalized: str
    category3: str
    components: tuple[str, ...]

    def __str__(self) -> str:
        return self.normalized


class ExtractionStatus(Enum):
    VALID = "valid"
    INVALID = "invalid"


@dataclass(frozen=True, slots=True)
class ExtractionOutcome:
    """Result of scanning free text for a code of the expected system."""

    status: ExtractionStatus
    code: ParsedCode | None = None
    matched_span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if (self.status is ExtractionStatus.VALID) != (self.code is not None):
            raise ValueError("VALID outcomes carry a code, INVALID ones do not")


class YesNo(Enum):
    YES = "yes"
    NO = "no"
    INVALID = "invalid"


_TRAILING_JUNK = re.compile(r"[\s†*!.\-]+$")

_ICD_SHAPE = re.compile(r"([A-Z])(\d{2})(?:\.(\d{1,2}))?\Z")
_TOPO_SHAPE = re.compile(r"([A-Z])(\d{2})(?:\.(\d))?\Z")
_MORPH_SHAPE = re.compile(r"(\d{4})/(\d)\Z")
_OPS_SHAPE = re.compile(r"(\d)-(\d{2})(\d(?:\.\d{1,2})?)?\Z")


def parse_code(
    raw: str,
    system: CodeSystem,
    *,
    histology_max: int = DEFAULT_HISTOLOGY_MAX,
) -> ParsedCode:
    """Validate and normalize a single code string.

    Normalization: strip surrounding whitespace, uppercase, drop trailing
    GM markers and lone dot/dash placeholder suffixes ("C64.-" becomes "C64").
    Raises CodeShapeError for grammar violations and CodeRangeError when the
    shape is right but the value is out of range (e.g. topography "C81.0").
    """
    text = _TRAILING_JUNK.sub("", raw.strip().upper())
    if not text:
        raise CodeShapeError(raw, system, "empty code")

    if system is CodeSystem.ICD10GM:
        m = _ICD_SHAPE.match(text)
        if not m:
            raise CodeShapeError(raw, system, "expected letter + 2 digits + optional .1-2 digits")
        letter, digits, sub = m.groups()
        normalized = f"{letter}{digits}" + (f".{sub}" if sub else "")
        return ParsedCode(system, normalized, f"{letter}{digits}", (letter, digits, sub or ""))

    if system is CodeSystem.ICDO3_TOPOGRAPHY:
        m = _TOPO_SHAPE.match(text)
        if not m:
            raise CodeShapeError(raw, system, "expected letter + 2 digits + optional .1 digit")
        letter, digits, sub = m.groups()
        if letter != "C" or int(digits) > 80:
            raise CodeRangeError(raw, system, "topography category must lie in C00..C80")
        normalized = f"C{digits}" + (f".{sub}" if sub else "")
        return ParsedCode(system, normalized, f"C{digits}", (letter, digits, sub or ""))

    if system is CodeSystem.ICDO3_MORPHOLOGY:
        m = _MORPH_SHAPE.match(text)
        if not m:
            raise CodeShapeError(raw, system, "expected 4-digit histology / 1-digit behavior")
        histology, behavior = m.groups()
        if not 8000 <= int(histology) <= histology_max:
            raise CodeRangeError(raw, system, f"histology must lie in 8000..{histology_max}")
        if behavior not in MORPHOLOGY_BEHAVIOR_DIGITS:
            raise CodeRangeError(raw, system, "behavior digit must be one of 0,1,2,3,6,9")
        return ParsedCode(system, f"{histology}/{behavior}", histology, (histology, behavior))

    if system is CodeSystem.OPS:
        m = _OPS_SHAPE.match(text)
        if not m:
            raise CodeShapeError(raw, system, "expected chapter-group like 5-45 or 5-452.01")
        chapter, group, rest = m.groups()
        if chapter not in OPS_CHAPTERS:
            raise CodeRangeError(raw, system, "chapter digit must be one of 1,3,5,6,8,9")
        normalized = f"{chapter}-{group}{rest or ''}"
        return ParsedCode(system, normalized, f"{chapter}-{group}", (chapter, group, rest or ""))

    raise ValueError(f"unknown code system: {system!r}")


def is_tumor_icd10(code: ParsedCode) -> bool:
    """True iff the ICD-10-GM category lies in the tumor block C00..D48.

    Sub-digits are unrestricted within the block, so the check reduces to a
    lexicographic comparison on the three-character category.
    """
    if code.system is not CodeSystem.ICD10GM:
        raise ValueError(f"is_tumor_icd10 expects an ICD-10-GM code, got {code.system.value}")
    return "C00" <= code.category3 <= "D48"


def category3(code: ParsedCode) -> str:
    """Three-character category (letter + two digits) of an ICD-style code."""
    if code.system not in (CodeSystem.ICD10GM, CodeSystem.ICDO3_TOPOGRAPHY):
        raise ValueError(f"category3 is defined for ICD-10-GM and topography codes, got {code.system.value}")
    return code.category3


# Candidate patterns are deliberately permissive on the letter (any A-Z, either
# case) so that out-of-range candidates are found and then rejected by the
# parser instead of silently skipped mid-token. Lookarounds keep trailing
# sentence punctuation out of the match and refuse candidates glued to further
# digits ("C64.123" yields no ICD-10 candidate at all).
_CANDIDATES: dict[CodeSystem, re.Pattern[str]] = {
    CodeSystem.ICD10GM: re.compile(
        r"(?<![A-Za-z0-9])[A-Za-z][0-9]{2}(?:\.[0-9]{1,2})?(?!\.?[0-9])(?![A-Za-z])"
    ),
    CodeSystem.ICDO3_TOPOGRAPHY: re.compile(
        r"(?<![A-Za-z0-9])[A-Za-z][0-9]{2}(?:\.[0-9])?(?!\.?[0-9])(?![A-Za-z])"
    ),
    CodeSystem.ICDO3_MORPHOLOGY: re.compile(r"(?<![0-9])[0-9]{4}/[0-9](?![0-9])"),
    CodeSystem.OPS: re.compile(r"(?<![0-9A-Za-z])[0-9]-[0-9]{2,3}(?:\.[0-9]{1,2})?(?!\.?[0-9])"),
}


def extract_code(
    answer_text: str,
    expected: CodeSystem,
    *,
    histology_max: int = DEFAULT_HISTOLOGY_MAX,
) -> ExtractionOutcome:
    """Scan free text for the first in-range code of the expected system.

    Candidates are tried left to right; a candidate with the right shape but
    the wrong range (a morphology code in a topography answer, "C81.0", ...)
    does not satisfy the expectation. If nothing qualifies the outcome is
    INVALID, which is how malformed answers get counted downstream.
    """
    for match in _CANDIDATES[expected].finditer(answer_text):
        try:
            code = parse_code(match.group(0), expected, histology_max=histology_max)
        except CodeError:
            continue
        return ExtractionOutcome(ExtractionStatus.VALID, code, match.span())
    return ExtractionOutcome(ExtractionStatus.INVALID)


_YES_NO_TOKEN = re.compile(r"\b(ja|nein)\b", re.IGNORECASE)
_SENTENCE_END = re.compile(r"[.!?]")


def extract_yes_no(answer_text: str) -> YesNo:
    """Read a German yes/no answer from the first sentence of the text.

    Exactly one of the standalone tokens "ja"/"nein" must occur there;
    both or neither make the answer uninterpretable.
    """
    first_sentence = _SENTENCE_END.split(answer_text, maxsplit=1)[0]
    tokens = {m.group(1).lower() for m in _YES_NO_TOKEN.finditer(first_sentence)}
    if tokens == {"ja"}:
        return YesNo.YES
    if tokens == {"nein"}:
        return YesNo.NO
    return YesNo.INVALID
