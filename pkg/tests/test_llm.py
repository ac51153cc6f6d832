from __future__ import annotations

import json

import httpx
import pytest

from malcve.deobf import SourceUnit
from malcve.llm import (
    CodeSummary,
    ContextTooLarge,
    CostLedger,
    HttpChatBackend,
    LlmError,
    LlmSession,
    MockBackend,
    ModelHandle,
    Price,
    PromptSet,
    SchemaError,
    parse_query_lines,
    render_sources,
)
from malcve.llm.backends import LlmRequest
from malcve.llm.types import CvePrediction, parse_json_reply
from malcve.rerank import RankedCve

from conftest import FIXTURES

MODEL = ModelHandle("test-model", context_limit=50_000)
SUMMARY = json.loads((FIXTURES / "summary_bare_verdict.json").read_text())
SOURCES = [SourceUnit("a/Main.java", "class Main {}"), SourceUnit("a/B.java", "class B {}")]


def session(rules, model=MODEL):
    ledger = CostLedger({model.model_id: Price(150_000, 600_000)})
    models = {s: model for s in ("summarize", "queries", "predict")}
    return LlmSession(MockBackend(rules), models, ledger)


def test_prompt_templates_render_and_hash():
    prompts = PromptSet.load()
    hashes = prompts.hashes()
    assert set(hashes) == {"summarize", "queries", "predict", "repair"}
    assert all(len(h) == 64 for h in hashes.values())
    text = prompts.render("summarize", files=render_sources(SOURCES))
    assert "File 1: a/Main.java" in text and "File 2: a/B.java" in text
    assert "{{" not in text
    # inserted text is not re-scanned for slots
    assert "{{files}}" in prompts.render("summarize", files="{{files}}")


def test_summarize_accepts_bare_verdict_string():
    s = session([{"step": "summarize", "response": SUMMARY}])
    summary = s.summarize_code(SOURCES)
    assert summary.verdict.label == "Malicious"
    assert summary.verdict.confidence is None
    assert summary.keywords[0] == "applet sandbox escape"
    assert len(s.transcript) == 1


def test_summarize_repairs_once():
    s = session([{"step": "summarize", "responses": ["{}", SUMMARY]}])
    summary = s.summarize_code(SOURCES)
    assert summary.verdict.is_malicious
    calls = s.backend.calls
    assert [c.attempt for c in calls] == [0, 1]
    assert "could not be used" in calls[1].prompt
    assert s.transcript[0].error and not s.transcript[1].error


def test_summarize_enum_violation_fails_after_retry():
    bad = dict(SUMMARY, verdict={"label": "Evil", "rationale": "x"})
    s = session([{"step": "summarize", "response": bad}])
    with pytest.raises(SchemaError) as info:
        s.summarize_code(SOURCES)
    assert len(info.value.raw_responses) == 2
    assert "Evil" in info.value.raw_responses[0]


def test_summary_requires_keywords_unless_benign():
    data = dict(SUMMARY, cve_search_queries={"status": "s", "message": "m", "keywords": []})
    with pytest.raises(ValueError):
        CodeSummary.from_dict(data)
    benign = dict(data, verdict={"label": "Benign", "rationale": "calculator", "confidence": 0.9})
    assert not CodeSummary.from_dict(benign).verdict.is_malicious


def test_summary_requires_all_ioc_lists():
    data = json.loads(json.dumps(SUMMARY))
    del data["indicators_of_compromise"]["mutex"]
    with pytest.raises(ValueError):
        CodeSummary.from_dict(data)


def test_context_overflow():
    big = [SourceUnit("Big.java", "x" * 400_000)]
    s = session([{"step": "summarize", "response": SUMMARY}])
    with pytest.raises(ContextTooLarge) as info:
        s.summarize_code(big)
    assert info.value.limit == 50_000 and info.value.prompt_tokens > 100_000
    assert s.backend.calls == []


def test_code_fence_is_tolerated():
    assert parse_json_reply('```json\n{"a": 1}\n```') == {"a": 1}
    with pytest.raises(ValueError):
        parse_json_reply("[1, 2]")


def _summary():
    return CodeSummary.from_dict(SUMMARY)


def test_generate_queries_six_lines():
    lines = "\n".join(f"{i}. query number {i}" for i in range(1, 7))
    assert len(session([{"step": "queries", "response": lines}]).generate_queries(_summary())) == 6


def test_generate_queries_dedupe_and_cap():
    lines = [f"- term {i}" for i in range(12)] + ["- TERM 3", "- term 5"]
    out = session([{"step": "queries", "response": "\n\n".join(lines)}]).generate_queries(_summary())
    assert len(out) == 10
    assert out[0] == "term 0"


def test_generate_queries_keep_text_verbatim():
    q = "sun.awt.SunToolkit getField reflection security bypass CVE"
    assert session([{"step": "queries", "response": f'1) "{q}"'}]).generate_queries(_summary()) == [q]


def test_generate_queries_fall_back_to_keywords():
    s = session([{"step": "queries", "response": "\n \n"}])
    assert s.generate_queries(_summary()) == _summary().keywords
    assert len(s.backend.calls) == 2


def test_parse_query_lines():
    assert parse_query_lines("1. a\n2) b\n* c\n• d\n\nA. e") == ["a", "b", "c", "d", "e"]


def _cands(*ids):
    return [RankedCve(c, 0.5, 0.0, 1.0, 1.0, 1.0) for c in ids]


PRED = {"behavior_explanation": "disables the sandbox", "matched_cve": "CVE-2012-4681",
        "justification": "reflection on sun.awt.SunToolkit bypasses SecurityManager restrictions"}


def test_predict_singleton():
    s = session([{"step": "predict", "response": PRED}])
    pred = s.predict_cve(_summary(), _cands("CVE-2012-4681"), SOURCES, {"CVE-2012-4681": "desc"})
    assert pred.matched_cve == "CVE-2012-4681"
    prompt = s.backend.calls[0].prompt
    assert "CVE-2012-4681: desc" in prompt and "class Main" in prompt


def test_predict_membership_enforced():
    wrong = dict(PRED, matched_cve="CVE-2099-0001")
    s = session([{"step": "predict", "response": wrong}])
    with pytest.raises(SchemaError):
        s.predict_cve(_summary(), _cands("CVE-2012-4681", "CVE-2013-0422"), SOURCES, {})
    assert len(s.backend.calls) == 2


def test_predict_none_allowed_and_candidate_bounds():
    s = session([{"step": "predict", "response": dict(PRED, matched_cve="NONE")}])
    assert s.predict_cve(_summary(), _cands("CVE-2012-4681"), SOURCES, {}).matched_cve == "NONE"
    with pytest.raises(ValueError):
        s.predict_cve(_summary(), [], SOURCES, {})
    with pytest.raises(ValueError):
        s.predict_cve(_summary(), _cands(*[f"CVE-2000-{i:04d}" for i in range(11)]), SOURCES, {})


def test_prediction_pattern():
    with pytest.raises(ValueError):
        CvePrediction.from_dict(dict(PRED, matched_cve="cve-2012-4681"))


def test_mock_matches_statelessly():
    backend = MockBackend([
        {"step": "summarize", "contains": ["alpha"], "attempt": 1, "response": "second"},
        {"step": "summarize", "contains": ["alpha"], "response": "first"},
    ])
    assert backend.complete(LlmRequest("summarize", "m", "alpha", 0)).text == "first"
    assert backend.complete(LlmRequest("summarize", "m", "alpha", 1)).text == "second"
    assert backend.complete(LlmRequest("summarize", "m", "alpha", 0)).text == "first"
    with pytest.raises(LlmError):
        backend.complete(LlmRequest("predict", "m", "alpha", 0))


def test_ledger_charged_from_usage():
    s = session([{"step": "summarize", "response": SUMMARY, "usage": {"input_tokens": 1_000_000,
                                                                     "output_tokens": 1_000_000}}])
    s.summarize_code(SOURCES)
    assert str(s.ledger.total) == "0.75"


def test_http_backend_payload_and_retry():
    seen = []

    def handler(request):
        seen.append(json.loads(request.content))
        if len(seen) == 1:
            return httpx.Response(429)
        return httpx.Response(200, json={"choices": [{"message": {"content": "hello"}}],
                                         "usage": {"prompt_tokens": 11, "completion_tokens": 2}})
    backend = HttpChatBackend(url="https://llm.test/v1/chat/completions", api_key="k",
                              client=httpx.Client(transport=httpx.MockTransport(handler)), sleep=lambda s: None)
    resp = backend.complete(LlmRequest("predict", "m1", "hi", 0, {"type": "object"}, "x"))
    assert (resp.text, resp.input_tokens, resp.output_tokens) == ("hello", 11, 2)
    assert seen[1]["response_format"]["json_schema"]["schema"] == {"type": "object"}
    assert seen[1]["model"] == "m1"


def test_http_backend_rejects_client_errors():
    backend = HttpChatBackend(url="https://llm.test/x", api_key="",
                              client=httpx.Client(transport=httpx.MockTransport(lambda r: httpx.Response(401))))
    with pytest.raises(LlmError):
        backend.complete(LlmRequest("predict", "m", "hi"))
