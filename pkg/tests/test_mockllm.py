from __future__ import annotations

import json
import time
from collections import Counter

import httpx
import pytest

from onkoqa.codes import (
    CodeSystem,
    ExtractionStatus,
    YesNo,
    extract_code,
    extract_yes_no,
)
from onkoqa.mockllm import (
    GoldEntry,
    MalformedStyle,
    OracleConfig,
    OracleRates,
    Outcome,
    QuestionTask,
    answer,
    detect_task,
    draw_outcome,
    load_oracle_config,
    serve,
)

GOLD = {
    "Nierentumor der rechten Niere": GoldEntry(
        icd10="C64", icdo_topo="C64.9", icdo_morph="8312/3", ops_category="5-55", is_tumor=True
    ),
    "Eisenmangelanämie": GoldEntry(icd10="D50.9", is_tumor=False),
}


def _cfg(**kwargs) -> OracleConfig:
    defaults = dict(gold_map=GOLD, rates=OracleRates(), seed=1)
    defaults.update(kwargs)
    return OracleConfig(**defaults)


# ------------------------------------------------------------ task detection

@pytest.mark.parametrize(
    "question,task",
    [
        ("Was ist der ICD-10-Code für „X“?", QuestionTask.ICD10),
        ("Welcher ICD-O-Topographie-Code passt zu „X“?", QuestionTask.ICDO_TOPO),
        ("Bestimme den ICD-O-3-Morphologiecode für „X“.", QuestionTask.ICDO_MORPH),
        ("Was ist die OPS-Hauptkategorie für „X“?", QuestionTask.OPS_CATEGORY),
        ("Ist „X“ eine Tumordiagnose?", QuestionTask.TUMOR_YN),
        ("Ist „X“ eine Tumordiagnose? Gib zusätzlich den ICD-10-Code an.", QuestionTask.TUMOR_YN_CODE),
        ("Wie ist das Wetter?", QuestionTask.UNKNOWN),
    ],
)
def test_detect_task(question, task):
    assert detect_task(question) is task


def test_eval_templates_are_all_detectable(all_templates):
    """Every built-in question formulation maps to a non-unknown task."""
    for t in all_templates:
        question = t.question("Nierentumor der rechten Niere")
        assert detect_task(question) is not QuestionTask.UNKNOWN, question


# ------------------------------------------------------------ answers

def test_exact_oracle_embeds_gold_code():
    q = "Was ist der ICD-10-Code für „Nierentumor der rechten Niere“?"
    text = answer(q, _cfg())
    assert "C64" in text
    assert extract_code(text, CodeSystem.ICD10GM).code.normalized == "C64"


def test_answer_is_deterministic():
    q = "Was ist der ICD-10-Code für „Nierentumor der rechten Niere“?"
    cfg = _cfg(rates=OracleRates(exact=0.4, category_only=0.3, malformed=0.2, refuse_verbose=0.1))
    assert answer(q, cfg) == answer(q, cfg)


def test_unknown_diagnosis_yields_verbose_prose():
    text = answer("Was ist der ICD-10-Code für „Völlig unbekannt“?", _cfg())
    assert extract_code(text, CodeSystem.ICD10GM).status is ExtractionStatus.INVALID


def test_yes_no_answers():
    cfg = _cfg()
    yes = answer("Ist „Nierentumor der rechten Niere“ eine Tumordiagnose?", cfg)
    assert extract_yes_no(yes) is YesNo.YES
    no = answer("Ist „Eisenmangelanämie“ eine Tumordiagnose?", cfg)
    assert extract_yes_no(no) is YesNo.NO


def test_yes_no_category_only_flips_polarity():
    cfg = _cfg(rates=OracleRates(exact=0.0, category_only=1.0, malformed=0.0, refuse_verbose=0.0))
    text = answer("Ist „Nierentumor der rechten Niere“ eine Tumordiagnose?", cfg)
    assert extract_yes_no(text) is YesNo.NO


def test_category_only_is_category_correct_but_not_exact():
    cfg = _cfg(rates=OracleRates(exact=0.0, category_only=1.0, malformed=0.0, refuse_verbose=0.0))
    for i in range(50):
        q = f"Was ist der ICD-10-Code für „Nierentumor der rechten Niere“? Variante {i}"
        outcome = extract_code(answer(q, cfg), CodeSystem.ICD10GM)
        assert outcome.status is ExtractionStatus.VALID
        assert outcome.code.category3 == "C64"
        assert outcome.code.normalized != "C64"


def test_morphology_shaped_malformed_on_topography_question():
    cfg = _cfg(
        rates=OracleRates(exact=0.0, category_only=0.0, malformed=1.0, refuse_verbose=0.0),
        malformed_style=MalformedStyle.MORPHOLOGY_SHAPED,
    )
    q = "Welcher ICD-O-Topographie-Code passt zu „Nierentumor der rechten Niere“?"
    text = answer(q, cfg)
    assert extract_code(text, CodeSystem.ICDO3_MORPHOLOGY).status is ExtractionStatus.VALID
    assert extract_code(text, CodeSystem.ICDO3_TOPOGRAPHY).status is ExtractionStatus.INVALID


@pytest.mark.parametrize("style", list(MalformedStyle))
@pytest.mark.parametrize(
    "question,system",
    [
        ("Was ist der ICD-10-Code für „{t}“?", CodeSystem.ICD10GM),
        ("Welcher ICD-O-Topographie-Code passt zu „{t}“?", CodeSystem.ICDO3_TOPOGRAPHY),
        ("Bestimme den ICD-O-3-Morphologiecode für „{t}“.", CodeSystem.ICDO3_MORPHOLOGY),
        ("Was ist die OPS-Hauptkategorie für „{t}“?", CodeSystem.OPS),
    ],
)
def test_malformed_answers_never_extract(style, question, system):
    """Malformed outputs must be uninterpretable for the asked task, always."""
    cfg = _cfg(
        rates=OracleRates(exact=0.0, category_only=0.0, malformed=1.0, refuse_verbose=0.0),
        malformed_style=style,
    )
    for seed in range(3):
        cfg_seeded = _cfg(
            rates=cfg.rates, malformed_style=style, seed=seed
        )
        for i in range(60):
            q = question.format(t="Nierentumor der rechten Niere") + f" V{i}"
            text = answer(q, cfg_seeded)
            assert extract_code(text, system).status is ExtractionStatus.INVALID, (text, system)


def test_refusals_are_invalid_for_every_extractor():
    cfg = _cfg(rates=OracleRates(exact=0.0, category_only=0.0, malformed=0.0, refuse_verbose=1.0))
    q = "Was ist der ICD-10-Code für „Nierentumor der rechten Niere“?"
    text = answer(q, cfg)
    for system in CodeSystem:
        assert extract_code(text, system).status is ExtractionStatus.INVALID
    assert extract_yes_no(text) is YesNo.INVALID


def test_rates_validation():
    with pytest.raises(ValueError, match="sum to 1"):
        OracleRates(exact=0.5, category_only=0.5, malformed=0.5)
    with pytest.raises(ValueError, match="nonnegative"):
        OracleRates(exact=1.5, category_only=-0.5)


def test_outcome_rate_recovery():
    """Empirical outcome frequencies over 5000 distinct questions match the
    configured rates within 3 binomial standard deviations."""
    rates = OracleRates(exact=0.5, category_only=0.3, malformed=0.2, refuse_verbose=0.0)
    n = 5000
    counts = Counter(draw_outcome(9, f"Frage Nummer {i}?", rates) for i in range(n))
    for outcome, p in [
        (Outcome.EXACT, 0.5),
        (Outcome.CATEGORY_ONLY, 0.3),
        (Outcome.MALFORMED, 0.2),
    ]:
        sd = (p * (1 - p) / n) ** 0.5
        assert abs(counts[outcome] / n - p) <= 3 * sd, outcome


# ------------------------------------------------------------ HTTP server

def _post_question(base_url: str, question: str) -> dict:
    return httpx.post(
        f"{base_url}/v1/chat/completions",
        json={"model": "mock", "messages": [{"role": "user", "content": question}]},
        timeout=10,
    ).json()


def test_serve_happy_path():
    with serve(_cfg()) as handle:
        health = httpx.get(handle.base_url, timeout=5)
        assert health.json() == {"status": "ok"}
        data = _post_question(
            handle.base_url, "Was ist der ICD-10-Code für „Nierentumor der rechten Niere“?"
        )
        assert data["object"] == "chat.completion"
        assert "C64" in data["choices"][0]["message"]["content"]


def test_serve_latency_injection():
    with serve(_cfg(latency_ms=50)) as handle:
        start = time.perf_counter()
        _post_question(handle.base_url, "Ist „Eisenmangelanämie“ eine Tumordiagnose?")
        assert time.perf_counter() - start >= 0.05


def test_two_servers_same_config_agree():
    q = "Was ist der ICD-10-Code für „Nierentumor der rechten Niere“?"
    cfg = _cfg(rates=OracleRates(exact=0.5, category_only=0.3, malformed=0.2, refuse_verbose=0.0))
    with serve(cfg) as one, serve(cfg) as two:
        a = _post_question(one.base_url, q)["choices"][0]["message"]["content"]
        b = _post_question(two.base_url, q)["choices"][0]["message"]["content"]
    assert a == b


def test_serve_rejects_unknown_path():
    with serve(_cfg()) as handle:
        response = httpx.post(f"{handle.base_url}/v2/other", json={}, timeout=5)
        assert response.status_code == 404


def test_load_oracle_config(tmp_path):
    path = tmp_path / "oracle.json"
    path.write_text(
        json.dumps(
            {
                "gold": {"Befund": {"icd10": "C50.1", "is_tumor": True}},
                "rates": {"exact": 0.9, "refuse_verbose": 0.1},
                "malformed_style": "gibberish",
                "latency_ms": 5,
                "seed": 7,
            }
        ),
        encoding="utf-8",
    )
    cfg = load_oracle_config(path)
    assert cfg.gold_map["Befund"].icd10 == "C50.1"
    assert cfg.rates.exact == 0.9
    assert cfg.malformed_style is MalformedStyle.GIBBERISH
    assert cfg.latency_ms == 5
    assert cfg.seed == 7
