"""Prompt templates shipped with the package, with content hashes."""
from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

TEMPLATE_NAMES = ("summarize", "queries", "predict", "repair")
_SLOT = re.compile(r"\{\{(\w+)\}\}")


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class PromptSet:
    templates: dict[str, str]

    @classmethod
    def load(cls, directory: Path | str | None = None) -> PromptSet:
        if directory is None:
            base = resources.files("malcve.llm") / "prompts"
            return cls({n: (base / f"{n}.txt").read_text("utf-8") for n in TEMPLATE_NAMES})
        directory = Path(directory)
        return cls({n: (directory / f"{n}.txt").read_text("utf-8") for n in TEMPLATE_NAMES})

    def hashes(self) -> dict[str, str]:
        return {name: sha256_text(self.templates[name]) for name in TEMPLATE_NAMES}

    def render(self, name: str, **values: str) -> str:
        """Fill ``{{slot}}`` markers in one pass; inserted text is not re-scanned."""
        def fill(m: re.Match) -> str:
            return values[m.group(1)]
        return _SLOT.sub(fill, self.templates[name])
