"""Static string deobfuscation for decompiled Java sources."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

from .fold import fold_text
from .lexer import LexError
from .literals import encode_string

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SourceUnit:
    path: str
    text: str
    folded_count: int = 0
    diagnostic: str = ""


@dataclass
class FoldReport:
    total_folds: int = 0
    failed_files: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"total_folds": self.total_folds, "failed_files": list(self.failed_files)}


def fold_strings(unit: SourceUnit) -> SourceUnit:
    """Replace statically computable string expressions with literals.

    A file the lexer cannot handle comes back unchanged with a diagnostic.
    """
    try:
        text, count = fold_text(unit.text)
    except LexError as exc:
        logger.info("skipping %s: %s", unit.path, exc)
        return replace(unit, diagnostic=f"not tokenizable: {exc}")
    return replace(unit, text=text, folded_count=unit.folded_count + count)


def fold_tree(units: list[SourceUnit]) -> tuple[list[SourceUnit], FoldReport]:
    report = FoldReport()
    out = []
    for unit in units:
        folded = fold_strings(unit)
        report.total_folds += folded.folded_count - unit.folded_count
        if folded.diagnostic:
            report.failed_files.append(unit.path)
        out.append(folded)
    return out, report


__all__ = ["SourceUnit", "FoldReport", "fold_strings", "fold_tree", "encode_string"]
