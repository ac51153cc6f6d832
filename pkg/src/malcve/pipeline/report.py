"""The per-file analysis report and its on-disk JSON form."""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

REPORT_SUFFIX = ".report.json"


@dataclass
class AnalysisReport:
    """Everything one analysis run produced, in a fixed field order.

    ``state`` is ``done``, ``failed`` or ``excluded``.  A failed run names the
    step that broke in ``failure``; the transcript still holds every model
    reply received up to that point.
    """

    file_sha256: str
    input_name: str
    state: str = "done"
    failure: dict | None = None
    decompile: dict | None = None
    deobfuscation: dict | None = None
    code_summary: dict | None = None
    search_queries: list[str] = field(default_factory=list)
    candidates: list[dict] = field(default_factory=list)
    prediction: dict | None = None
    llm_transcript: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    @property
    def verdict(self) -> str | None:
        if not self.code_summary:
            return None
        v = self.code_summary["verdict"]
        return v if isinstance(v, str) else v["label"]

    @property
    def matched_cve(self) -> str | None:
        return self.prediction["matched_cve"] if self.prediction else None

    @property
    def candidate_ids(self) -> list[str]:
        return [c["cve_id"] for c in self.candidates]

    @property
    def cost_pico(self) -> int:
        return int(self.metadata.get("cost", {}).get("total_pico", 0))

    def as_dict(self) -> dict:
        return {
            "file_sha256": self.file_sha256,
            "input_name": self.input_name,
            "state": self.state,
            "failure": self.failure,
            "decompile": self.decompile,
            "deobfuscation": self.deobfuscation,
            "code_summary": self.code_summary,
            "search_queries": list(self.search_queries),
            "candidates": list(self.candidates),
            "prediction": self.prediction,
            "llm_transcript": list(self.llm_transcript),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.as_dict(), indent=2, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> AnalysisReport:
        return cls(**{k: data[k] for k in cls.__dataclass_fields__ if k in data})

    @classmethod
    def load(cls, path: Path | str) -> AnalysisReport:
        return cls.from_dict(json.loads(Path(path).read_text("utf-8")))


def report_path(out_dir: Path | str, sha256: str) -> Path:
    return Path(out_dir) / f"{sha256}{REPORT_SUFFIX}"


def write_report(report: AnalysisReport, out_dir: Path | str) -> Path:
    """Write atomically to ``<out_dir>/<sha256>.report.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = report_path(out_dir, report.file_sha256)
    fd, tmp = tempfile.mkstemp(prefix=".report-", dir=out_dir)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report.to_json())
        os.replace(tmp, target)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    return target


def load_reports(directory: Path | str) -> list[AnalysisReport]:
    return [AnalysisReport.load(p) for p in sorted(Path(directory).glob(f"*{REPORT_SUFFIX}"))]
