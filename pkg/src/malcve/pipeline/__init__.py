"""Per-file analysis, report persistence and batch orchestration."""
from __future__ import annotations

from .analysis import PipelineContext, make_backend, replay_ledger, run_analysis, sha256_file
from .batch import BatchSummary, ManifestEntry, download_worker, parse_manifest, parse_manifest_text, run_batch
from .download import RequestRateLimiter, SampleFetcher
from .journal import Journal, TransitionError, WorkItem
from .report import AnalysisReport, load_reports, report_path, write_report

__all__ = [
    "AnalysisReport", "BatchSummary", "Journal", "ManifestEntry", "PipelineContext",
    "RequestRateLimiter", "SampleFetcher", "TransitionError", "WorkItem", "download_worker",
    "load_reports", "make_backend", "parse_manifest", "parse_manifest_text", "replay_ledger", "report_path",
    "run_analysis", "run_batch", "sha256_file", "write_report",
]
