"""Batch orchestration: manifest parsing, the download worker and analysis workers."""
from __future__ import annotations

import hashlib
import logging
import queue
import re
import threading
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path

from ..clock import format_ts
from ..errors import ConfigError
from ..llm.accounting import PER_MILLION
from .analysis import PipelineContext, run_analysis, sha256_file
from .download import SampleFetcher
from .journal import Journal, WorkItem
from .report import AnalysisReport, report_path, write_report

logger = logging.getLogger(__name__)

_SHA256 = re.compile(r"^[0-9a-fA-F]{64}$")


@dataclass(frozen=True)
class ManifestEntry:
    kind: str       # hash | path
    value: str


def parse_manifest_text(text: str, base_dir: Path | str = ".") -> list[ManifestEntry]:
    """One sha256 or path per line; ``#`` starts a comment; duplicates dropped."""
    out: list[ManifestEntry] = []
    seen: set[str] = set()
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if _SHA256.match(line):
            entry = ManifestEntry("hash", line.lower())
        else:
            p = Path(line)
            entry = ManifestEntry("path", str(p if p.is_absolute() else Path(base_dir) / p))
        if entry.value not in seen:
            seen.add(entry.value)
            out.append(entry)
    return out


def parse_manifest(path: Path | str) -> list[ManifestEntry]:
    path = Path(path)
    return parse_manifest_text(path.read_text("utf-8"), path.parent)


@dataclass
class BatchSummary:
    done: int = 0
    failed: int = 0
    excluded: int = 0
    total_cost_pico: int = 0
    per_file_cost_pico: dict[str, int] = field(default_factory=dict)

    @property
    def total(self) -> int:
        return self.done + self.failed + self.excluded

    @property
    def total_cost(self) -> Decimal:
        return Decimal(self.total_cost_pico) / Decimal(PER_MILLION * PER_MILLION)

    @property
    def mean_cost_per_file(self) -> Decimal:
        if not self.total:
            return Decimal(0)
        return self.total_cost / self.total

    def add(self, report: AnalysisReport) -> None:
        setattr(self, report.state, getattr(self, report.state) + 1)
        self.per_file_cost_pico[report.file_sha256] = report.cost_pico
        self.total_cost_pico += report.cost_pico

    def as_dict(self) -> dict:
        return {
            "done": self.done,
            "failed": self.failed,
            "excluded": self.excluded,
            "total": self.total,
            "total_cost": str(self.total_cost),
            "mean_cost_per_file": str(self.mean_cost_per_file),
            "per_file_cost": {k: str(Decimal(v) / Decimal(PER_MILLION * PER_MILLION))
                              for k, v in sorted(self.per_file_cost_pico.items())},
        }

    def render(self) -> str:
        lines = [f"done {self.done}  failed {self.failed}  excluded {self.excluded}  total {self.total}",
                 f"total cost {self.total_cost}",
                 f"cost per file (mean) {self.mean_cost_per_file}"]
        for sha, pico in sorted(self.per_file_cost_pico.items()):
            lines.append(f"  {sha}  {Decimal(pico) / Decimal(PER_MILLION * PER_MILLION)}")
        return "\n".join(lines) + "\n"


def _stub_report(ctx: PipelineContext, item: WorkItem, stage: str, message: str) -> AnalysisReport:
    now = format_ts(ctx.clock())
    return AnalysisReport(
        file_sha256=item.sha256,
        input_name=Path(item.source).name if item.source else item.sha256,
        state="failed",
        failure={"stage": stage, "error_type": "", "message": message},
        metadata={"timestamps": {"started": now, "finished": now},
                  "cost": {"counters": {}, "total_pico": 0, "total": "0"}},
    )


def download_worker(items: Iterable[WorkItem], fetcher: SampleFetcher,
                    on_ready: Callable[[WorkItem], None],
                    on_failed: Callable[[WorkItem], None],
                    journal: Journal | None = None) -> None:
    """Fetch each queued item in turn and hand it to the analysis queue.

    Hash mismatches and exhausted retries mark the item failed; it is never
    queued for analysis.
    """
    journal = journal or Journal(None)
    for item in items:
        result = fetcher.fetch(item.sha256)
        if not result.ok:
            journal.record(item.advance("failed", result.error))
            on_failed(item)
            continue
        item.source = str(result.path)
        journal.record(item.advance("downloaded"))
        journal.record(item.advance("queued_analysis"))
        on_ready(item)


def run_batch(entries: Sequence[ManifestEntry], ctx: PipelineContext, worker_count: int,
              out_dir: Path | str, fetcher: SampleFetcher | None = None,
              journal: Journal | None = None) -> BatchSummary:
    """Drive every entry to a terminal state and write one report per item.

    Items already terminal in *journal* (with a report on disk) are counted
    without being re-run.
    """
    if worker_count < 1:
        raise ConfigError("worker_count must be at least 1")
    out_dir = Path(out_dir)
    journal = journal or Journal(None)
    previous = journal.replay()
    summary = BatchSummary()
    lock = threading.Lock()

    def finish(report: AnalysisReport) -> None:
        write_report(report, out_dir)
        with lock:
            summary.add(report)

    local: list[WorkItem] = []
    remote: list[WorkItem] = []
    for entry in entries:
        if entry.kind == "hash":
            sha, source = entry.value, ""
        else:
            try:
                sha, source = sha256_file(entry.value), entry.value
            except OSError as exc:
                # no content to hash; key the report by the path text instead
                sha = hashlib.sha256(entry.value.encode("utf-8")).hexdigest()
                item = WorkItem(sha, "queued_analysis", 0, entry.value)
                item.advance("analyzing")
                journal.record(item.advance("failed", f"unreadable: {exc}"))
                finish(_stub_report(ctx, item, "input", f"unreadable: {exc}"))
                continue
        old = previous.get(sha)
        if old is not None and old.terminal and report_path(out_dir, sha).is_file():
            with lock:
                summary.add(AnalysisReport.load(report_path(out_dir, sha)))
            continue
        attempts = old.attempts if old is not None else 0
        if source:
            local.append(WorkItem(sha, "queued_analysis", attempts, source))
        elif fetcher is not None and (fetcher.dest_dir / f"{sha}.jar").is_file():
            local.append(WorkItem(sha, "queued_analysis", attempts, str(fetcher.dest_dir / f"{sha}.jar")))
        else:
            remote.append(WorkItem(sha, "queued_download", attempts))

    work: queue.Queue[WorkItem | None] = queue.Queue()
    for item in local:
        journal.record(item)
        work.put(item)

    def analysis_worker() -> None:
        while True:
            item = work.get()
            if item is None:
                return
            journal.record(item.advance("analyzing"))
            try:
                report = run_analysis(item.source, ctx, file_sha256=item.sha256)
            except Exception as exc:    # no item may be dropped silently
                logger.exception("analysis of %s crashed", item.sha256)
                report = _stub_report(ctx, item, "internal", f"{type(exc).__name__}: {exc}")
                report.input_name = Path(item.source).name
            journal.record(item.advance(report.state, (report.failure or {}).get("stage", "")))
            finish(report)

    def feed() -> None:
        try:
            if remote:
                if fetcher is None:
                    for item in remote:
                        journal.record(item.advance("failed", "no download source configured"))
                        finish(_stub_report(ctx, item, "download", "no download source configured"))
                else:
                    for item in remote:
                        journal.record(item)
                    download_worker(
                        remote, fetcher, work.put,
                        lambda it: finish(_stub_report(ctx, it, "download", it.detail)),
                        journal)
        finally:
            for _ in range(worker_count):
                work.put(None)

    workers = [threading.Thread(target=analysis_worker, name=f"analysis-{i}", daemon=True)
               for i in range(worker_count)]
    downloader = threading.Thread(target=feed, name="download", daemon=True)
    for t in [downloader, *workers]:
        t.start()
    for t in [downloader, *workers]:
        t.join()
    return summary
