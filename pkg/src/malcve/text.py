"""Small text helpers shared by the embedder, BM25 and token accounting."""
from __future__ import annotations

import math
import re
from collections.abc import Iterable

_SPLIT = re.compile(r"[\W_]+")


def split_tokens(text: str) -> list[str]:
    """Lowercase *text* and split it on every non-alphanumeric character."""
    return [t for t in _SPLIT.split(text.lower()) if t]


def estimate_tokens(text: str) -> int:
    """Rough LLM token count: one token per four characters, rounded up."""
    return math.ceil(len(text) / 4)


def dedupe_casefold(items: Iterable[str]) -> list[str]:
    seen: set[str] = set()
    out = []
    for item in items:
        key = item.casefold()
        if key not in seen:
            seen.add(key)
            out.append(item)
    return out
