"""Deterministic mock chat-completions server acting as a coding oracle.

The oracle answers each question by hashing (seed, question text) into one of
four outcomes: EXACT (gold code or correct yes/no), CATEGORY_ONLY (right
category, wrong detail), MALFORMED (a string guaranteed to be uninterpretable
for the asked task) and REFUSE_VERBOSE (code-free prose). Hashing the question
instead of consuming a shared random stream keeps answers independent of
request order, so concurrency cannot perturb determinism.

The HTTP face is the minimal OpenAI-style chat-completions shape: POST
/v1/chat/completions with a messages list, one assistant choice back.
Configuration files are JSON mirroring OracleConfig (see `load_oracle_config`).
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from enum import Enum
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

from .codes import CodeSystem, parse_code

log = logging.getLogger(__name__)


class Outcome(Enum):
    EXACT = "exact"
    CATEGORY_ONLY = "category_only"
    MALFORMED = "malformed"
    REFUSE_VERBOSE = "refuse_verbose"


class MalformedStyle(str, Enum):
    MORPHOLOGY_SHAPED = "morphology_shaped"
    GIBBERISH = "gibberish"
    MIXED = "mixed"


class QuestionTask(Enum):
    """What a question is asking for, inferred from its wording."""

    ICD10 = "icd10"
    ICDO_TOPO = "icdo_topo"
    ICDO_MORPH = "icdo_morph"
    OPS_CATEGORY = "ops_category"
    TUMOR_YN = "tumor_yn"
    TUMOR_YN_CODE = "tumor_yn_code"
    UNKNOWN = "unknown"


@dataclass(frozen=True, slots=True)
class GoldEntry:
    icd10: str | None = None
    icdo_topo: str | None = None
    icdo_morph: str | None = None
    ops_category: str | None = None
    is_tumor: bool = False


@dataclass(frozen=True, slots=True)
class OracleRates:
    exact: float = 1.0
    category_only: float = 0.0
    malformed: float = 0.0
    refuse_verbose: float = 0.0

    def __post_init__(self) -> None:
        values = (self.exact, self.category_only, self.malformed, self.refuse_verbose)
        if any(v < 0 for v in values):
            raise ValueError(f"outcome rates must be nonnegative: {values}")
        if abs(sum(values) - 1.0) > 1e-9:
            raise ValueError(f"outcome rates must sum to 1, got {sum(values)}")


@dataclass(frozen=True)
class OracleConfig:
    gold_map: dict[str, GoldEntry]
    rates: OracleRates = field(default_factory=OracleRates)
    malformed_style: MalformedStyle = MalformedStyle.MIXED
    latency_ms: float = 0.0
    seed: int = 0


_QUOTED = re.compile("„(.+?)“|\"(.+?)\"")

_YN_MARKERS = ("tumordiagnose", "tumorerkrankung", "tumorbereich", "diagnose eines tumors")

# Strings that match no code grammar and contain no standalone ja/nein token;
# test_mockllm re-checks this against every extractor.
_GIBBERISH = (
    "K4X-99/Z",
    "Q0-ZZ-0X",
    "XC-4/4X",
    "ZZZ-9/X",
)

_REFUSALS = (
    "Um diese Frage zuverlässig zu beantworten, benötige ich weitere klinische Angaben, "
    "etwa zur Histologie, zum Befund und zur Lokalisation. Ohne zusätzliche Unterlagen "
    "möchte ich mich nicht festlegen.",
    "Diese Angabe reicht für eine verbindliche Kodierung nicht aus. Bitte ergänzen Sie "
    "weitere Befunde, damit eine eindeutige Zuordnung möglich wird.",
)

_UNCERTAIN_YN = "Das lässt sich anhand der vorliegenden Angabe nicht eindeutig beantworten."


def detect_task(question_text: str) -> QuestionTask:
    q = question_text.lower()
    if "morpholog" in q or "histolog" in q:
        return QuestionTask.ICDO_MORPH
    if "topograph" in q or "lokalisation" in q:
        return QuestionTask.ICDO_TOPO
    if "hauptkategorie" in q:
        return QuestionTask.OPS_CATEGORY
    if any(marker in q for marker in _YN_MARKERS):
        return QuestionTask.TUMOR_YN_CODE if "icd-10" in q else QuestionTask.TUMOR_YN
    if "icd-10" in q:
        return QuestionTask.ICD10
    return QuestionTask.UNKNOWN


def find_gold(question_text: str, gold_map: dict[str, GoldEntry]) -> GoldEntry | None:
    """Locate the diagnosis text embedded in a question.

    Quoted spans get an O(1) lookup; unquoted questions fall back to a
    substring scan over the gold keys.
    """
    for m in _QUOTED.finditer(question_text):
        key = m.group(1) or m.group(2)
        if key in gold_map:
            return gold_map[key]
    for key, entry in gold_map.items():
        if key in question_text:
            return entry
    return None


def _digest(seed: int, question_text: str) -> bytes:
    return hashlib.sha256(f"{seed}|{question_text}".encode("utf-8")).digest()


def draw_outcome(seed: int, question_text: str, rates: OracleRates) -> Outcome:
    u = int.from_bytes(_digest(seed, question_text)[:8], "big") / 2**64
    edges = (
        (rates.exact, Outcome.EXACT),
        (rates.exact + rates.category_only, Outcome.CATEGORY_ONLY),
        (rates.exact + rates.category_only + rates.malformed, Outcome.MALFORMED),
    )
    for edge, outcome in edges:
        if u < edge:
            return outcome
    return Outcome.REFUSE_VERBOSE


def _pick(options: tuple[str, ...], digest: bytes, offset: int) -> str:
    return options[digest[offset] % len(options)]


def _gold_code(task: QuestionTask, gold: GoldEntry) -> str | None:
    return {
        QuestionTask.ICD10: gold.icd10,
        QuestionTask.TUMOR_YN_CODE: gold.icd10,
        QuestionTask.ICDO_TOPO: gold.icdo_topo,
        QuestionTask.ICDO_MORPH: gold.icdo_morph,
        QuestionTask.OPS_CATEGORY: gold.ops_category,
    }.get(task)


def _sentence(task: QuestionTask, code: str, yes: bool | None = None) -> str:
    if task is QuestionTask.ICD10:
        return f"Der ICD-10-Code lautet {code}."
    if task is QuestionTask.TUMOR_YN_CODE:
        return f"{'Ja' if yes else 'Nein'}, der ICD-10-Code lautet {code}."
    if task is QuestionTask.ICDO_TOPO:
        return f"Der Topographie-Code lautet {code}."
    if task is QuestionTask.ICDO_MORPH:
        return f"Der Morphologie-Code lautet {code}."
    return f"Die OPS-Hauptkategorie ist {code}."


def _category_only_code(task: QuestionTask, gold_code: str, digest: bytes) -> str:
    """A valid code sharing the gold code's category but differing from it."""
    if task is QuestionTask.ICDO_MORPH:
        parsed = parse_code(gold_code, CodeSystem.ICDO3_MORPHOLOGY)
        behaviors = [b for b in "012369" if b != parsed.components[1]]
        return f"{parsed.components[0]}/{_pick(tuple(behaviors), digest, 9)}"
    if task is QuestionTask.OPS_CATEGORY:
        parsed = parse_code(gold_code, CodeSystem.OPS)
        groups = [g for g in ("41", "52", "63") if g != parsed.components[1]]
        return f"{parsed.components[0]}-{_pick(tuple(groups), digest, 9)}"
    system = CodeSystem.ICDO3_TOPOGRAPHY if task is QuestionTask.ICDO_TOPO else CodeSystem.ICD10GM
    parsed = parse_code(gold_code, system)
    sub = str(digest[9] % 10)
    candidate = f"{parsed.category3}.{sub}"
    if candidate == parsed.normalized:
        candidate = f"{parsed.category3}.{(digest[9] + 1) % 10}"
    return candidate


def _malformed(task: QuestionTask, style: MalformedStyle, digest: bytes) -> str:
    if task in (QuestionTask.TUMOR_YN, QuestionTask.UNKNOWN):
        return _UNCERTAIN_YN
    if style is MalformedStyle.MIXED:
        style = (
            MalformedStyle.MORPHOLOGY_SHAPED if digest[10] % 2 == 0 else MalformedStyle.GIBBERISH
        )
    if style is MalformedStyle.GIBBERISH:
        return f"Der Code lautet {_pick(_GIBBERISH, digest, 11)}."
    if task is QuestionTask.ICDO_MORPH:
        # An in-range morphology shape would be a valid answer here, so use an
        # out-of-range histology instead.
        histology = 1000 + int.from_bytes(digest[11:13], "big") % 7000
    else:
        histology = 8000 + int.from_bytes(digest[11:13], "big") % 2000
    behavior = "012369"[digest[13] % 6]
    return f"Der Code lautet {histology:04d}/{behavior}."


def answer(question_text: str, cfg: OracleConfig) -> str:
    """Deterministic oracle reply for one question (pure in (cfg, question))."""
    digest = _digest(cfg.seed, question_text)
    task = detect_task(question_text)
    gold = find_gold(question_text, cfg.gold_map)
    if gold is None or task is QuestionTask.UNKNOWN:
        return _pick(_REFUSALS, digest, 14)

    outcome = draw_outcome(cfg.seed, question_text, cfg.rates)
    if outcome is Outcome.REFUSE_VERBOSE:
        return _pick(_REFUSALS, digest, 14)
    if outcome is Outcome.MALFORMED:
        return _malformed(task, cfg.malformed_style, digest)

    if task is QuestionTask.TUMOR_YN:
        correct = gold.is_tumor if outcome is Outcome.EXACT else not gold.is_tumor
        return (
            "Ja, das ist eine Tumordiagnose." if correct else "Nein, das ist keine Tumordiagnose."
        )

    gold_code = _gold_code(task, gold)
    if gold_code is None:
        return _pick(_REFUSALS, digest, 14)
    if outcome is Outcome.EXACT:
        return _sentence(task, gold_code, yes=gold.is_tumor)
    return _sentence(task, _category_only_code(task, gold_code, digest), yes=gold.is_tumor)


class _OracleHandler(BaseHTTPRequestHandler):
    protocol_version = "HTTP/1.1"
    server: "_OracleServer"

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self) -> None:  # noqa: N802 (http.server API)
        self._send_json(200, {"status": "ok"})

    def do_POST(self) -> None:  # noqa: N802
        if self.path.rstrip("/") != "/v1/chat/completions":
            self._send_json(404, {"error": f"unknown path {self.path}"})
            return
        try:
            length = int(self.headers.get("Content-Length", "0"))
            request = json.loads(self.rfile.read(length))
            question = next(
                m["content"] for m in reversed(request["messages"]) if m["role"] == "user"
            )
        except (ValueError, KeyError, StopIteration) as exc:
            self._send_json(400, {"error": f"malformed request: {exc}"})
            return
        self.server.received.append(request)
        cfg = self.server.oracle_config
        if cfg.latency_ms > 0:
            time.sleep(cfg.latency_ms / 1000.0)
        content = answer(question, cfg)
        self._send_json(
            200,
            {
                "id": "mock-completion",
                "object": "chat.completion",
                "created": int(time.time()),
                "model": request.get("model", "mock"),
                "choices": [
                    {
                        "index": 0,
                        "message": {"role": "assistant", "content": content},
                        "finish_reason": "stop",
                    }
                ],
            },
        )

    def log_message(self, format: str, *args) -> None:
        log.debug("mockllm: " + format, *args)


class _OracleServer(ThreadingHTTPServer):
    daemon_threads = True

    def __init__(self, address: tuple[str, int], cfg: OracleConfig) -> None:
        super().__init__(address, _OracleHandler)
        self.oracle_config = cfg
        self.received: list[dict] = []  # request payloads, for test inspection


@dataclass
class MockServerHandle:
    server: _OracleServer
    thread: threading.Thread

    @property
    def base_url(self) -> str:
        host, port = self.server.server_address[:2]
        return f"http://{host}:{port}"

    def close(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=5)

    def __enter__(self) -> "MockServerHandle":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def serve(cfg: OracleConfig, host: str = "127.0.0.1", port: int = 0) -> MockServerHandle:
    """Start the oracle server on a background thread (port 0 picks a free one)."""
    server = _OracleServer((host, port), cfg)
    thread = threading.Thread(target=server.serve_forever, name="mockllm", daemon=True)
    thread.start()
    log.info("mock oracle listening on %s", f"http://{host}:{server.server_address[1]}")
    return MockServerHandle(server=server, thread=thread)


def load_oracle_config(path: str | Path) -> OracleConfig:
    """Read an OracleConfig from JSON.

    Schema: {"gold": {text: {"icd10": ..., "icdo_topo": ..., "icdo_morph": ...,
    "ops_category": ..., "is_tumor": ...}}, "rates": {"exact": ...,
    "category_only": ..., "malformed": ..., "refuse_verbose": ...},
    "malformed_style": "mixed", "latency_ms": 0, "seed": 0}
    """
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    gold_map = {
        text: GoldEntry(
            icd10=info.get("icd10"),
            icdo_topo=info.get("icdo_topo"),
            icdo_morph=info.get("icdo_morph"),
            ops_category=info.get("ops_category"),
            is_tumor=bool(info.get("is_tumor", False)),
        )
        for text, info in data.get("gold", {}).items()
    }
    return OracleConfig(
        gold_map=gold_map,
        rates=OracleRates(**data.get("rates", {"exact": 1.0})),
        malformed_style=MalformedStyle(data.get("malformed_style", "mixed")),
        latency_ms=float(data.get("latency_ms", 0.0)),
        seed=int(data.get("seed", 0)),
    )
