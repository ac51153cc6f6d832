"""Chat-completion backends: an HTTPS client and a scripted mock."""
from __future__ import annotations

import json
import os
import threading
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx

from ..errors import ConfigError
from ..text import estimate_tokens
from .types import LlmError


@dataclass(frozen=True)
class LlmRequest:
    step: str                 # summarize | queries | predict
    model_id: str
    prompt: str
    attempt: int = 0
    response_schema: Mapping | None = None
    schema_name: str = ""


@dataclass(frozen=True)
class LlmResponse:
    text: str
    input_tokens: int
    output_tokens: int


class LlmBackend(Protocol):
    def complete(self, request: LlmRequest) -> LlmResponse: ...


class MockBackend:
    """Answers requests from a script of match rules.

    Script format (JSON)::

        {"rules": [
            {"step": "summarize", "contains": ["Payload.java"],
             "responses": [<attempt 0 reply>, <attempt 1 reply>],
             "usage": {"input_tokens": 1200, "output_tokens": 300}},
            ...
        ]}

    The first rule whose ``step``, ``contains`` substrings and optional
    ``attempt`` all match wins.  Replies may be strings or JSON values (which
    are serialized).  ``responses[i]`` answers attempt ``i``; the last entry
    repeats.  Matching never depends on call order, so results are the same
    under any worker interleaving.
    """

    def __init__(self, rules: Sequence[Mapping]):
        self.rules = list(rules)
        self.calls: list[LlmRequest] = []
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path: Path | str) -> MockBackend:
        data = json.loads(Path(path).read_text("utf-8"))
        return cls(data["rules"] if isinstance(data, dict) else data)

    def _matches(self, rule: Mapping, request: LlmRequest) -> bool:
        if "step" in rule and rule["step"] != request.step:
            return False
        if "attempt" in rule and rule["attempt"] != request.attempt:
            return False
        needles = rule.get("contains", [])
        if isinstance(needles, str):
            needles = [needles]
        return all(n in request.prompt for n in needles)

    def complete(self, request: LlmRequest) -> LlmResponse:
        with self._lock:
            self.calls.append(request)
        for rule in self.rules:
            if self._matches(rule, request):
                break
        else:
            raise LlmError(f"mock script has no rule for step {request.step!r} attempt {request.attempt}")
        if "responses" in rule:
            replies = rule["responses"]
            reply = replies[min(request.attempt, len(replies) - 1)]
        else:
            reply = rule["response"]
        text = reply if isinstance(reply, str) else json.dumps(reply, ensure_ascii=False)
        usage = rule.get("usage", {})
        return LlmResponse(
            text,
            int(usage.get("input_tokens", estimate_tokens(request.prompt))),
            int(usage.get("output_tokens", estimate_tokens(text))),
        )


class HttpChatBackend:
    """OpenAI-compatible ``/chat/completions`` client with schema-constrained output."""

    def __init__(self, url: str | None = None, api_key: str | None = None,
                 client: httpx.Client | None = None, max_retries: int = 3,
                 backoff: float = 2.0, sleep: Callable[[float], None] = time.sleep,
                 timeout: float = 300.0):
        self.url = url or os.environ.get("MALCVE_LLM_URL")
        if not self.url:
            raise ConfigError("HTTP LLM backend needs MALCVE_LLM_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("MALCVE_LLM_API_KEY")
        self.client = client or httpx.Client(timeout=timeout)
        self.max_retries = max_retries
        self.backoff = backoff
        self.sleep = sleep

    def payload(self, request: LlmRequest) -> dict:
        body: dict = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt}],
        }
        if request.response_schema is not None:
            body["response_format"] = {
                "type": "json_schema",
                "json_schema": {"name": request.schema_name or request.step,
                                "schema": request.response_schema},
            }
        return body

    def complete(self, request: LlmRequest) -> LlmResponse:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        last = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.post(self.url, json=self.payload(request), headers=headers)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code != 200:
                raise LlmError(f"LLM request rejected: HTTP {resp.status_code}: {resp.text[:300]}")
            body = resp.json()
            try:
                text = body["choices"][0]["message"]["content"] or ""
            except (KeyError, IndexError, TypeError):
                raise LlmError(f"unexpected completion payload: {str(body)[:300]}") from None
            usage = body.get("usage") or {}
            return LlmResponse(text,
                               int(usage.get("prompt_tokens", estimate_tokens(request.prompt))),
                               int(usage.get("completion_tokens", estimate_tokens(text))))
        raise LlmError(f"LLM endpoint failed after {self.max_retries + 1} attempts: {last}")
