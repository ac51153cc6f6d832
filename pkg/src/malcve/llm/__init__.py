"""Language-model gateway: prompts, backends, budgets and costs."""
from __future__ import annotations

from .accounting import CostLedger, Price, RateBudget, UnknownModelError, charge, price_from_dollars
from .backends import HttpChatBackend, LlmRequest, LlmResponse, MockBackend
from .gateway import LlmSession, parse_query_lines, render_sources
from .prompts import PromptSet
from .types import (
    CodeSummary,
    ContextTooLarge,
    CvePrediction,
    LlmError,
    ModelHandle,
    SchemaError,
    TranscriptEntry,
    Verdict,
)

__all__ = [
    "CodeSummary", "ContextTooLarge", "CostLedger", "CvePrediction", "HttpChatBackend",
    "LlmError", "LlmRequest", "LlmResponse", "LlmSession", "MockBackend", "ModelHandle",
    "Price", "PromptSet", "RateBudget", "SchemaError", "TranscriptEntry", "UnknownModelError",
    "Verdict", "charge", "parse_query_lines", "price_from_dollars", "render_sources",
]
