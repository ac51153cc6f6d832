"""Analysis of a single JAR from decompilation to CVE prediction."""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .. import __version__
from ..clock import Clock, format_ts, utcnow
from ..config import Config
from ..decompile import check_available, decompiled, load_sources
from ..deobf import fold_tree
from ..embeddings import EmbeddingProvider, make_embedder
from ..errors import ConfigError, MalcveError
from ..index import ExactIndex, HnswIndex, META_FILE, aggregate_max, build_index, load_index
from ..kb import KbSnapshot, KnowledgeBase
from ..llm import CostLedger, HttpChatBackend, LlmSession, MockBackend, PromptSet, RateBudget
from ..llm.backends import LlmBackend
from ..llm.types import SchemaError
from ..rerank import expand_by_cwe, fuse, prompt_candidates
from ..text import dedupe_casefold, estimate_tokens
from .report import AnalysisReport

logger = logging.getLogger(__name__)

INDEX_DIR = "index"


def sha256_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def make_backend(config: Config) -> LlmBackend:
    spec = config.raw["llm_backend"]
    if spec.get("kind") == "mock":
        if "script" not in spec:
            raise ConfigError("mock LLM backend needs a 'script' path")
        script = config.resolve(spec["script"])
        if not script.is_file():
            raise ConfigError(f"mock LLM script not found: {script}")
        return MockBackend.from_file(script)
    return HttpChatBackend(url=spec.get("url"))


@dataclass
class PipelineContext:
    """Shared, read-only state for every analysis worker."""

    config: Config
    snapshot: KbSnapshot
    index: ExactIndex | HnswIndex
    embedder: EmbeddingProvider
    backend: LlmBackend
    workdir: Path
    budget: RateBudget = field(default_factory=RateBudget)
    prompts: PromptSet = field(default_factory=PromptSet.load)
    clock: Clock = utcnow

    @classmethod
    def build(cls, config: Config, kb_dir: Path | str, workdir: Path | str,
              backend: LlmBackend | None = None, embedder: EmbeddingProvider | None = None,
              clock: Clock = utcnow, budget: RateBudget | None = None) -> PipelineContext:
        """Load the KB (and its saved index when present) and wire up services."""
        check_available(config.decompilers)
        emb_cfg = config.embedding
        kb = KnowledgeBase.load(kb_dir, expected_dim=emb_cfg.dim)
        if kb.manifest.embedding_model_id != emb_cfg.model_id:
            raise ConfigError(f"KB was embedded with {kb.manifest.embedding_model_id!r}, "
                              f"config uses {emb_cfg.model_id!r}")
        snap = kb.snapshot()
        index_dir = Path(kb_dir) / INDEX_DIR
        if (index_dir / META_FILE).is_file():
            index = load_index(index_dir, snap)
        else:
            index = build_index(snap, config.index_engine, **config.index_params)
        rb = config.raw["rate_budget"]
        return cls(
            config=config,
            snapshot=snap,
            index=index,
            embedder=embedder or make_embedder(emb_cfg),
            backend=backend or make_backend(config),
            workdir=Path(workdir),
            budget=budget or RateBudget(int(rb["tokens_per_minute"]), int(rb["requests_in_flight_max"])),
            clock=clock,
        )

    def new_ledger(self) -> CostLedger:
        return CostLedger(self.config.prices)


class _StepFailed(Exception):
    def __init__(self, stage: str, error: Exception):
        super().__init__(f"{stage}: {error}")
        self.stage = stage
        self.error = error


def _failure(stage: str, exc: Exception) -> dict:
    out = {"stage": stage, "error_type": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, SchemaError):
        out["raw_responses"] = list(exc.raw_responses)
    return out


def run_analysis(jar_path: Path | str, ctx: PipelineContext, input_name: str | None = None,
                 file_sha256: str | None = None) -> AnalysisReport:
    """Run every analysis step on one JAR and return its report.

    Benign verdicts stop after query generation.  A step raising a pipeline
    error ends the run with ``state='failed'`` and the step name recorded;
    configuration errors propagate.
    """
    jar = Path(jar_path)
    cfg = ctx.config
    started = ctx.clock()
    report = AnalysisReport(file_sha256=file_sha256 or sha256_file(jar),
                            input_name=input_name or jar.name)
    ledger = ctx.new_ledger()
    session = LlmSession(ctx.backend, cfg.models, ledger, ctx.budget, ctx.prompts)

    def step(stage, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError:
            raise
        except (MalcveError, ValueError, OSError) as exc:
            raise _StepFailed(stage, exc) from exc

    try:
        with decompiled(jar, cfg.decompilers, ctx.workdir) as result:
            report.decompile = result.summary()
            if result.status == "excluded":
                report.state = "excluded"
                return report
            sources = step("decompile", load_sources, result.source_dir)
        units, fold_report = fold_tree(sources)
        report.deobfuscation = fold_report.as_dict()

        summary = step("summarize", session.summarize_code, units)
        report.code_summary = summary.as_dict()
        if not summary.verdict.is_malicious:
            return report

        generated = step("queries", session.generate_queries, summary)
        queries = dedupe_casefold(q.strip() for q in [*generated, *summary.keywords] if q.strip())
        report.search_queries = queries

        vectors = step("embed", ctx.embedder.embed_batch, queries)
        ledger.charge(ctx.embedder.config.model_id,
                      embedding_tokens=sum(estimate_tokens(q) for q in queries))
        if not len(ctx.index):
            return report
        hits = [step("search", ctx.index.search, v, cfg.search_k, i) for i, v in enumerate(vectors)]
        pooled = aggregate_max(hits)
        if not pooled:
            return report
        descriptions = {h.cve_id: ctx.snapshot.get(h.cve_id).description for h in pooled}
        ranked = step("rerank", fuse, pooled, summary.libraries_used, descriptions, cfg.fusion)
        ranked = expand_by_cwe(ranked, ctx.snapshot, cfg.fusion)
        report.candidates = [r.as_dict() for r in ranked]

        chosen = prompt_candidates(ranked, cfg.fusion)
        for r in chosen:
            descriptions.setdefault(r.cve_id, ctx.snapshot.get(r.cve_id).description)
        prediction = step("predict", session.predict_cve, summary, chosen, units, descriptions)
        report.prediction = prediction.as_dict()
        return report
    except _StepFailed as failed:
        logger.warning("analysis of %s failed at %s: %s", report.input_name, failed.stage, failed.error)
        report.state = "failed"
        report.failure = _failure(failed.stage, failed.error)
        return report
    finally:
        report.llm_transcript = [e.as_dict() for e in session.transcript]
        report.metadata = {
            "pipeline_version": __version__,
            "models": {s: m.model_id for s, m in sorted(cfg.models.items())},
            "embedding_model": ctx.embedder.config.model_id,
            "prompt_hashes": ctx.prompts.hashes(),
            "kb": {"record_count": ctx.snapshot.manifest.record_count,
                   "source_feed_version": ctx.snapshot.manifest.source_feed_version},
            "index_engine": ctx.index.engine,
            "bm25_corpus": "candidate_pool",
            "config": cfg.snapshot(),
            "timestamps": {"started": format_ts(started), "finished": format_ts(ctx.clock())},
            "cost": ledger.as_dict(),
        }


def replay_ledger(report: AnalysisReport, prices) -> CostLedger:
    """Rebuild a report's cost ledger from its transcript and search queries."""
    ledger = CostLedger(prices)
    for entry in report.llm_transcript:
        ledger.charge(entry["model"], entry["input_tokens"], entry["output_tokens"])
    if report.search_queries:
        ledger.charge(report.metadata["embedding_model"],
                      embedding_tokens=sum(estimate_tokens(q) for q in report.search_queries))
    return ledger
