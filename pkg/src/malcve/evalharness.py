"""Classification accuracy, CVE accuracy and recall@k over analysis reports."""
from __future__ import annotations

import csv
import io
import json
import statistics
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, MalcveError
from .pipeline.report import AnalysisReport

DEFAULT_KS = (1, 3, 5, 10)
FOOTER = "RQ1: Suspicious verdicts count as malicious; excluded or failed files without a verdict are left out."
UNDEFINED = "undefined"
_TRUE = {"1", "true", "yes", "y", "malicious"}
_FALSE = {"0", "false", "no", "n", "benign"}


class MissingTruth(MalcveError):
    def __init__(self, missing: Sequence[str]):
        self.missing = sorted(missing)
        super().__init__("no ground truth for: " + ", ".join(self.missing))


@dataclass(frozen=True)
class GroundTruth:
    file_sha256: str
    is_malicious: bool
    true_cves: tuple[str, ...] = ()

    def __post_init__(self):
        if self.true_cves and not self.is_malicious:
            raise ValueError(f"{self.file_sha256}: CVE labels on a benign file")


def parse_truth(text: str) -> dict[str, GroundTruth]:
    """Read ``sha256,is_malicious,cve_list`` rows; cve_list is ``;``-separated."""
    truth: dict[str, GroundTruth] = {}
    for n, row in enumerate(csv.reader(io.StringIO(text)), 1):
        if not row or not "".join(row).strip() or row[0].strip().startswith("#"):
            continue
        if n == 1 and row[0].strip().lower() == "sha256":
            continue
        if len(row) < 2:
            raise ConfigError(f"truth row {n}: expected sha256,is_malicious,cve_list")
        flag = row[1].strip().lower()
        if flag not in _TRUE | _FALSE:
            raise ConfigError(f"truth row {n}: is_malicious must be 0/1/true/false, got {row[1]!r}")
        cves = tuple(c.strip() for c in (row[2] if len(row) > 2 else "").split(";") if c.strip())
        sha = row[0].strip().lower()
        try:
            truth[sha] = GroundTruth(sha, flag in _TRUE, cves)
        except ValueError as exc:
            raise ConfigError(f"truth row {n}: {exc}") from None
    return truth


def load_truth(path: Path | str) -> dict[str, GroundTruth]:
    return parse_truth(Path(path).read_text("utf-8"))


def _check(reports: Iterable[AnalysisReport], truth: Mapping[str, GroundTruth]) -> list[AnalysisReport]:
    reports = list(reports)
    missing = [r.file_sha256 for r in reports if r.file_sha256 not in truth]
    if missing:
        raise MissingTruth(missing)
    return reports


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def accuracy_rq1(reports: Iterable[AnalysisReport], truth: Mapping[str, GroundTruth]) -> float | None:
    """Share of files whose malicious/benign verdict matches the label."""
    judged = [r for r in _check(reports, truth) if r.verdict is not None]
    correct = sum((r.verdict != "Benign") == truth[r.file_sha256].is_malicious for r in judged)
    return _ratio(correct, len(judged))


def accuracy_rq2(reports: Iterable[AnalysisReport], truth: Mapping[str, GroundTruth]) -> float | None:
    """Share of CVE predictions naming one of the file's true CVEs."""
    predicted = [r for r in _check(reports, truth) if r.prediction is not None]
    correct = sum(r.matched_cve in truth[r.file_sha256].true_cves for r in predicted)
    return _ratio(correct, len(predicted))


def recall_at_k(reports: Iterable[AnalysisReport], truth: Mapping[str, GroundTruth], k: int,
                allowed_ks: Sequence[int] = DEFAULT_KS) -> float | None:
    """Malicious files with a true CVE among the first *k* candidates, over all malicious files.

    Malicious files without a report count as misses.
    """
    if k not in allowed_ks:
        raise ValueError(f"k must be one of {tuple(allowed_ks)}, got {k}")
    by_sha = {r.file_sha256: r for r in _check(reports, truth)}
    malicious = [t for t in truth.values() if t.is_malicious]
    hits = 0
    for t in malicious:
        report = by_sha.get(t.file_sha256)
        if report is not None and set(report.candidate_ids[:k]) & set(t.true_cves):
            hits += 1
    return _ratio(hits, len(malicious))


@dataclass
class RunMetrics:
    accuracy_rq1: float | None
    accuracy_rq2: float | None
    recall_at: dict[int, float | None]
    n_files: int

    def values(self) -> dict[str, float | None]:
        out = {"accuracy_rq1": self.accuracy_rq1, "accuracy_rq2": self.accuracy_rq2}
        out.update({f"recall@{k}": v for k, v in sorted(self.recall_at.items())})
        return out

    def as_dict(self) -> dict:
        return {"accuracy_rq1": self.accuracy_rq1, "accuracy_rq2": self.accuracy_rq2,
                "recall_at": {str(k): v for k, v in sorted(self.recall_at.items())},
                "n_files": self.n_files}

    @classmethod
    def from_dict(cls, data: Mapping) -> RunMetrics:
        return cls(data["accuracy_rq1"], data["accuracy_rq2"],
                   {int(k): v for k, v in data["recall_at"].items()}, int(data["n_files"]))


def compute_run(reports: Iterable[AnalysisReport], truth: Mapping[str, GroundTruth],
                ks: Sequence[int] = DEFAULT_KS) -> RunMetrics:
    reports = _check(reports, truth)
    return RunMetrics(accuracy_rq1(reports, truth), accuracy_rq2(reports, truth),
                      {k: recall_at_k(reports, truth, k, ks) for k in ks}, len(reports))


def describe(values: Sequence[float | None]) -> dict[str, float | None]:
    """Mean, max, min and population standard deviation of the defined values."""
    defined = [v for v in values if v is not None]
    if not defined:
        return {"mean": None, "max": None, "min": None, "std": None}
    return {"mean": statistics.fmean(defined), "max": max(defined), "min": min(defined),
            "std": statistics.pstdev(defined)}


@dataclass
class ModelRow:
    model: str
    runs: list[RunMetrics] = field(default_factory=list)

    def stats(self) -> dict[str, dict[str, float | None]]:
        columns = self.runs[0].values().keys() if self.runs else []
        return {c: describe([r.values()[c] for r in self.runs]) for c in columns}


@dataclass
class MetricsTable:
    rows: list[ModelRow]
    ks: tuple[int, ...] = DEFAULT_KS

    @property
    def columns(self) -> list[str]:
        return ["accuracy_rq1", "accuracy_rq2", *[f"recall@{k}" for k in self.ks]]

    def as_dict(self) -> dict:
        return {
            "ks": list(self.ks),
            "models": [{"model": row.model, "runs": [r.as_dict() for r in row.runs],
                        "stats": row.stats()} for row in self.rows],
            "footer": FOOTER,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> MetricsTable:
        return cls([ModelRow(m["model"], [RunMetrics.from_dict(r) for r in m["runs"]])
                    for m in data["models"]], tuple(data["ks"]))


def build_table(runs: Iterable[tuple[str, RunMetrics]], ks: Sequence[int] = DEFAULT_KS) -> MetricsTable:
    rows: dict[str, ModelRow] = {}
    for model, metrics in runs:
        rows.setdefault(model, ModelRow(model)).runs.append(metrics)
    return MetricsTable(list(rows.values()), tuple(ks))


def _cell(v: float | None) -> str:
    return UNDEFINED if v is None else f"{v:.4f}"


def render_table(table: MetricsTable) -> str:
    columns = table.columns
    width = max(len(UNDEFINED), *(len(c) for c in columns)) + 2
    lines = []
    for row in table.rows:
        stats = row.stats()
        n = sum(r.n_files for r in row.runs)
        lines.append(f"model {row.model}  runs {len(row.runs)}  files {n}")
        lines.append(f"{'':<10}" + "".join(f"{c:>{width}}" for c in columns))
        for label, key in (("Mean", "mean"), ("Max", "max"), ("Min", "min"), ("Std Dev", "std")):
            lines.append(f"{label:<10}" + "".join(f"{_cell(stats[c][key]):>{width}}" for c in columns))
        lines.append("")
    lines.append(FOOTER)
    return "\n".join(lines) + "\n"


def emit_table(table: MetricsTable) -> tuple[str, str]:
    """The aligned text table and its JSON form."""
    return render_table(table), json.dumps(table.as_dict(), indent=2) + "\n"


def run_model_id(reports: Sequence[AnalysisReport]) -> str:
    for r in reports:
        model = r.metadata.get("models", {}).get("predict")
        if model:
            return model
    return "unknown"
