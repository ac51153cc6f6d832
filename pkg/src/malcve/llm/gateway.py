"""The per-file LLM session: summarization, query generation, CVE choice."""
from __future__ import annotations

import json
import re
import threading
from collections.abc import Callable, Mapping, Sequence

from ..deobf import SourceUnit
from ..rerank import RankedCve
from ..text import dedupe_casefold, estimate_tokens
from .accounting import CostLedger, RateBudget
from .backends import LlmBackend, LlmRequest, LlmResponse
from .prompts import PromptSet, sha256_text
from .types import (
    CODE_SUMMARY_SCHEMA,
    CVE_PREDICTION_SCHEMA,
    CodeSummary,
    ContextTooLarge,
    CvePrediction,
    ModelHandle,
    SchemaError,
    TranscriptEntry,
    parse_json_reply,
)

STEPS = ("summarize", "queries", "predict")
MAX_QUERIES = 10
MAX_CANDIDATES = 10

_LIST_MARK = re.compile(r"^\s*(?:(?:\d+|[a-zA-Z])[.):]\s+|[-*•]\s+)")
_QUOTED = re.compile(r'^(["\'`])(.*)\1$')

Tokenizer = Callable[[str], int]


def render_sources(sources: Sequence[SourceUnit]) -> str:
    """One ``File N:`` block per source, numbered from 1."""
    blocks = []
    for n, unit in enumerate(sources, 1):
        blocks.append(f"File {n}: {unit.path}\n{unit.text.rstrip()}\n")
    return "\n".join(blocks)


def render_candidates(candidates: Sequence[RankedCve], descriptions: Mapping[str, str]) -> str:
    return "\n".join(f"{i}. {c.cve_id}: {descriptions.get(c.cve_id, '')}"
                     for i, c in enumerate(candidates, 1))


def parse_query_lines(text: str) -> list[str]:
    """Split a plain-text reply into search queries.

    Blank lines, list numbering and bullets are removed, surrounding quotes
    dropped, and duplicates (ignoring case) collapsed.
    """
    out = []
    for line in text.splitlines():
        line = _LIST_MARK.sub("", line).strip()
        m = _QUOTED.match(line)
        if m:
            line = m.group(2).strip()
        if line:
            out.append(line)
    return dedupe_casefold(out)


class LlmSession:
    """Sends one file's prompts through a shared backend and rate budget.

    Every reply is kept verbatim in :attr:`transcript` before it is parsed,
    and every call is charged to :attr:`ledger`.
    """

    def __init__(self, backend: LlmBackend, models: Mapping[str, ModelHandle],
                 ledger: CostLedger, budget: RateBudget | None = None,
                 prompts: PromptSet | None = None,
                 tokenizers: Mapping[str, Tokenizer] | None = None):
        missing = [s for s in STEPS if s not in models]
        if missing:
            raise ValueError(f"no model configured for steps: {', '.join(missing)}")
        self.backend = backend
        self.models = dict(models)
        self.ledger = ledger
        self.budget = budget
        self.prompts = prompts or PromptSet.load()
        self.tokenizers = dict(tokenizers or {})
        self.transcript: list[TranscriptEntry] = []
        self._lock = threading.Lock()

    def count_tokens(self, model: ModelHandle, text: str) -> int:
        return self.tokenizers.get(model.model_id, estimate_tokens)(text)

    def _call(self, step: str, model: ModelHandle, prompt: str, attempt: int,
              schema: Mapping | None) -> LlmResponse:
        needed = self.count_tokens(model, prompt)
        if needed > model.context_limit:
            raise ContextTooLarge(needed, model.context_limit, model.model_id)
        request = LlmRequest(step, model.model_id, prompt, attempt, schema, f"{step}_reply")
        if self.budget is not None:
            grant = min(needed + model.max_output_tokens, self.budget.tokens_per_minute)
            with self.budget.reserve(grant):
                response = self.backend.complete(request)
        else:
            response = self.backend.complete(request)
        self.ledger.charge(model.model_id, response.input_tokens, response.output_tokens)
        with self._lock:
            self.transcript.append(TranscriptEntry(
                step, attempt, model.model_id, sha256_text(prompt), response.text,
                response.input_tokens, response.output_tokens))
        return response

    def _note_error(self, error: str) -> None:
        with self._lock:
            self.transcript[-1].error = error

    def _structured(self, step: str, model: ModelHandle, prompt: str, schema: Mapping,
                    build: Callable[[dict], object]):
        raw = []
        current = prompt
        for attempt in range(2):
            text = self._call(step, model, current, attempt, schema).text
            raw.append(text)
            try:
                return build(parse_json_reply(text))
            except ValueError as exc:
                error = str(exc)
                self._note_error(error)
            current = prompt + "\n\n" + self.prompts.render("repair", error=error)
        raise SchemaError(f"{step}: reply still invalid after one repair attempt: {error}", raw)

    def summarize_code(self, sources: Sequence[SourceUnit],
                       model: ModelHandle | None = None) -> CodeSummary:
        model = model or self.models["summarize"]
        prompt = self.prompts.render("summarize", files=render_sources(sources))
        return self._structured("summarize", model, prompt, CODE_SUMMARY_SCHEMA, CodeSummary.from_dict)

    def generate_queries(self, summary: CodeSummary, model: ModelHandle | None = None) -> list[str]:
        model = model or self.models["queries"]
        payload = json.dumps(summary.as_dict(), indent=2, ensure_ascii=False)
        prompt = self.prompts.render("queries", summary=payload)
        for attempt in range(2):
            queries = parse_query_lines(self._call("queries", model, prompt, attempt, None).text)
            if queries:
                return queries[:MAX_QUERIES]
            self._note_error("no queries in reply")
        return dedupe_casefold(k.strip() for k in summary.keywords if k.strip())[:MAX_QUERIES]

    def predict_cve(self, summary: CodeSummary, candidates: Sequence[RankedCve],
                    sources: Sequence[SourceUnit], descriptions: Mapping[str, str],
                    model: ModelHandle | None = None) -> CvePrediction:
        if not 1 <= len(candidates) <= MAX_CANDIDATES:
            raise ValueError(f"predict_cve needs 1..{MAX_CANDIDATES} candidates, got {len(candidates)}")
        model = model or self.models["predict"]
        prompt = self.prompts.render(
            "predict",
            summary=json.dumps(summary.as_dict(), indent=2, ensure_ascii=False),
            cves=render_candidates(candidates, descriptions),
            code=render_sources(sources),
        )
        allowed = {c.cve_id for c in candidates}
        return self._structured("predict", model, prompt, CVE_PREDICTION_SCHEMA,
                                lambda d: CvePrediction.from_dict(d, allowed))
