"""Structured LLM outputs and their JSON schemas."""
from __future__ import annotations

import copy
import json
import re
from collections.abc import Mapping
from dataclasses import dataclass

import jsonschema

from ..errors import MalcveError

LABELS = ("Benign", "Suspicious", "Malicious")
IOC_FIELDS = ("urls", "created_files", "registry_entries", "mutex", "network_activity")
CVE_OR_NONE = r"^(CVE-\d{4}-\d{4,}|NONE)$"


class LlmError(MalcveError):
    pass


class SchemaError(LlmError):
    """Response still invalid after the repair reprompt."""

    def __init__(self, message: str, raw_responses: list[str] | None = None):
        super().__init__(message)
        self.raw_responses = list(raw_responses or [])


class ContextTooLarge(LlmError):
    def __init__(self, prompt_tokens: int, limit: int, model_id: str = ""):
        super().__init__(f"prompt needs ~{prompt_tokens} tokens, {model_id or 'model'} allows {limit}")
        self.prompt_tokens = prompt_tokens
        self.limit = limit


_STR_LIST = {"type": "array", "items": {"type": "string"}}

VERDICT_SCHEMA = {
    "type": "object",
    "properties": {
        "label": {"type": "string", "enum": list(LABELS)},
        "confidence": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
        "rationale": {"type": "string"},
    },
    "required": ["label", "rationale"],
}

CODE_SUMMARY_SCHEMA = {
    "type": "object",
    "properties": {
        "verdict": VERDICT_SCHEMA,
        "summary": {"type": "string"},
        "activities": _STR_LIST,
        "indicators_of_compromise": {
            "type": "object",
            "properties": {name: _STR_LIST for name in IOC_FIELDS},
            "required": list(IOC_FIELDS),
        },
        "libraries_used": _STR_LIST,
        "threat_mapping": _STR_LIST,
        "cve_search_queries": {
            "type": "object",
            "properties": {
                "status": {"type": "string"},
                "message": {"type": "string"},
                "keywords": _STR_LIST,
            },
            "required": ["status", "message", "keywords"],
        },
    },
    "required": ["verdict", "summary", "activities", "indicators_of_compromise",
                 "libraries_used", "cve_search_queries"],
}

# Replies may also carry the verdict as a bare label string.
_SUMMARY_ACCEPT = copy.deepcopy(CODE_SUMMARY_SCHEMA)
_SUMMARY_ACCEPT["properties"]["verdict"] = {
    "anyOf": [VERDICT_SCHEMA, {"type": "string", "enum": list(LABELS)}]}

CVE_PREDICTION_SCHEMA = {
    "type": "object",
    "properties": {
        "behavior_explanation": {"type": "string"},
        "matched_cve": {"type": "string", "pattern": CVE_OR_NONE},
        "justification": {"type": "string"},
    },
    "required": ["behavior_explanation", "matched_cve", "justification"],
}


@dataclass(frozen=True)
class Verdict:
    label: str
    rationale: str = ""
    confidence: float | None = None

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"verdict label must be one of {LABELS}, got {self.label!r}")

    @property
    def is_malicious(self) -> bool:
        return self.label != "Benign"

    def as_dict(self) -> dict:
        return {"label": self.label, "confidence": self.confidence, "rationale": self.rationale}


@dataclass(frozen=True)
class CodeSummary:
    verdict: Verdict
    summary: str
    activities: list[str]
    indicators_of_compromise: dict[str, list[str]]
    libraries_used: list[str]
    cve_search_queries: dict
    threat_mapping: list[str] | None = None

    @property
    def keywords(self) -> list[str]:
        return list(self.cve_search_queries.get("keywords", []))

    def as_dict(self) -> dict:
        out = {
            "verdict": self.verdict.as_dict(),
            "summary": self.summary,
            "activities": list(self.activities),
            "indicators_of_compromise": {k: list(self.indicators_of_compromise[k]) for k in IOC_FIELDS},
            "libraries_used": list(self.libraries_used),
            "cve_search_queries": {
                "status": self.cve_search_queries.get("status", ""),
                "message": self.cve_search_queries.get("message", ""),
                "keywords": self.keywords,
            },
        }
        if self.threat_mapping is not None:
            out["threat_mapping"] = list(self.threat_mapping)
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> CodeSummary:
        """Validate *data* against the summary schema and build the object."""
        try:
            jsonschema.validate(data, _SUMMARY_ACCEPT)
        except jsonschema.ValidationError as exc:
            raise ValueError(_describe(exc)) from None
        raw = data["verdict"]
        if isinstance(raw, str):
            verdict = Verdict(raw)
        else:
            verdict = Verdict(raw["label"], raw.get("rationale", ""), raw.get("confidence"))
        summary = cls(
            verdict=verdict,
            summary=data["summary"],
            activities=list(data["activities"]),
            indicators_of_compromise={k: list(data["indicators_of_compromise"][k]) for k in IOC_FIELDS},
            libraries_used=list(data["libraries_used"]),
            cve_search_queries=dict(data["cve_search_queries"]),
            threat_mapping=list(data["threat_mapping"]) if "threat_mapping" in data else None,
        )
        if verdict.is_malicious and not [k for k in summary.keywords if k.strip()]:
            raise ValueError("cve_search_queries.keywords must be non-empty for a non-benign verdict")
        return summary


@dataclass(frozen=True)
class CvePrediction:
    behavior_explanation: str
    matched_cve: str
    justification: str

    def as_dict(self) -> dict:
        return {"behavior_explanation": self.behavior_explanation,
                "matched_cve": self.matched_cve, "justification": self.justification}

    @classmethod
    def from_dict(cls, data: Mapping, allowed: set[str] | None = None) -> CvePrediction:
        try:
            jsonschema.validate(data, CVE_PREDICTION_SCHEMA)
        except jsonschema.ValidationError as exc:
            raise ValueError(_describe(exc)) from None
        pred = cls(data["behavior_explanation"], data["matched_cve"], data["justification"])
        if allowed is not None and pred.matched_cve != "NONE" and pred.matched_cve not in allowed:
            raise ValueError(f"matched_cve {pred.matched_cve} is not one of the listed candidates")
        return pred


@dataclass
class TranscriptEntry:
    step: str
    attempt: int
    model: str
    prompt_sha256: str
    response: str
    input_tokens: int
    output_tokens: int
    error: str = ""

    def as_dict(self) -> dict:
        return {"step": self.step, "attempt": self.attempt, "model": self.model,
                "prompt_sha256": self.prompt_sha256, "response": self.response,
                "input_tokens": self.input_tokens, "output_tokens": self.output_tokens,
                "error": self.error}


@dataclass(frozen=True)
class ModelHandle:
    model_id: str
    context_limit: int = 128_000
    max_output_tokens: int = 4_096


_FENCE = re.compile(r"^\s*```(?:json)?\s*\n(.*?)\n\s*```\s*$", re.DOTALL)


def parse_json_reply(text: str) -> dict:
    m = _FENCE.match(text)
    body = m.group(1) if m else text
    try:
        data = json.loads(body)
    except json.JSONDecodeError as exc:
        raise ValueError(f"reply is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ValueError("reply must be a JSON object")
    return data


def _describe(exc: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in exc.absolute_path) or "(root)"
    return f"schema violation at {where}: {exc.message}"

