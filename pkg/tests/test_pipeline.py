from __future__ import annotations

import hashlib
import json
import zipfile
from pathlib import Path

import httpx
import pytest

from malcve.clock import fixed_clock
from malcve.errors import ConfigError
from malcve.llm import MockBackend
from malcve.pipeline import (
    AnalysisReport,
    Journal,
    ManifestEntry,
    PipelineContext,
    RequestRateLimiter,
    SampleFetcher,
    TransitionError,
    WorkItem,
    download_worker,
    load_reports,
    parse_manifest_text,
    report_path,
    run_analysis,
    run_batch,
    write_report,
)

from conftest import FIXED_TIME, FIXTURES, MALICIOUS, SAMPLES, decompilers, fixture_config, make_jar


class VirtualClock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now

    def sleep(self, seconds):
        self.now += seconds


def context(tmp_path, kb_dir, backend=None, **overrides):
    cfg = fixture_config(tmp_path, **overrides)
    return PipelineContext.build(cfg, kb_dir, tmp_path / "work", backend=backend,
                                 clock=fixed_clock(FIXED_TIME))


@pytest.fixture
def ctx(tmp_path, kb_dir):
    return context(tmp_path, kb_dir)


@pytest.mark.parametrize("name", MALICIOUS)
def test_planted_cve_ranks_first_and_is_predicted(ctx, jars, planted, name):
    report = run_analysis(jars[name], ctx)
    assert report.state == "done"
    assert report.decompile["tool_used"] == "stub-primary"
    assert report.candidate_ids[0] == planted[name]
    assert report.matched_cve == planted[name]
    assert [e["step"] for e in report.llm_transcript] == ["summarize", "queries", "predict"]
    assert report.metadata["timestamps"]["started"] == FIXED_TIME


def test_benign_sample_skips_retrieval(ctx, jars):
    report = run_analysis(jars["calculator"], ctx)
    assert report.state == "done" and report.verdict == "Benign"
    assert report.candidates == [] and report.prediction is None
    assert [e["step"] for e in report.llm_transcript] == ["summarize"]


def test_rerun_is_byte_identical(tmp_path, kb_dir, jars):
    outs = []
    for run in ("a", "b"):
        ctx = context(tmp_path, kb_dir)
        path = write_report(run_analysis(jars["gondvv"], ctx), tmp_path / run)
        outs.append(path.read_bytes())
    assert outs[0] == outs[1]


def test_report_round_trip(ctx, jars, tmp_path):
    report = run_analysis(jars["jmxbean"], ctx)
    path = write_report(report, tmp_path / "out")
    assert path == report_path(tmp_path / "out", report.file_sha256)
    assert AnalysisReport.load(path).to_json() == report.to_json()
    assert report.to_json().endswith("}\n")


def test_deobfuscation_applied_before_summary(ctx, jars):
    report = run_analysis(jars["gondvv"], ctx)
    assert report.deobfuscation["total_folds"] > 0


def test_excluded_when_both_decompilers_fail(tmp_path, kb_dir, jars):
    ctx = context(tmp_path, kb_dir, decompilers=decompilers("fail", "fail", tmp_path))
    report = run_analysis(jars["gondvv"], ctx)
    assert report.state == "excluded"
    assert report.code_summary is None and report.llm_transcript == []
    assert (tmp_path / "stub-primary.count").read_text().count("\n") == 1
    assert (tmp_path / "stub-fallback.count").read_text().count("\n") == 1


def test_fallback_used(tmp_path, kb_dir, jars):
    ctx = context(tmp_path, kb_dir, decompilers=decompilers("fail", "ok", tmp_path))
    report = run_analysis(jars["gondvv"], ctx)
    assert report.decompile["tool_used"] == "stub-fallback"
    assert report.state == "done"


def test_decompiled_sources_are_removed(ctx, jars):
    run_analysis(jars["cmmraster"], ctx)
    assert not any(ctx.workdir.glob("src-*"))


def test_failure_at_summarize_keeps_raw_replies(tmp_path, kb_dir, jars):
    ctx = context(tmp_path, kb_dir, backend=MockBackend([{"step": "summarize", "response": "{}"}]))
    report = run_analysis(jars["gondvv"], ctx)
    assert report.state == "failed"
    assert report.failure["stage"] == "summarize"
    assert report.failure["raw_responses"] == ["{}", "{}"]
    assert len(report.llm_transcript) == 2


def test_failure_at_predict(tmp_path, kb_dir, jars):
    rules = [r for r in json.loads((FIXTURES / "mock_llm.json").read_text())["rules"]
             if r["step"] != "predict"]
    ctx = context(tmp_path, kb_dir, backend=MockBackend(rules))
    report = run_analysis(jars["gondvv"], ctx)
    assert report.state == "failed" and report.failure["stage"] == "predict"
    assert report.candidates    # work done before the failure is kept


def test_missing_decompiler_is_config_error(tmp_path, kb_dir):
    bad = [{"name": "x", "command": "/nonexistent/tool {jar} {outdir}", "role": "primary"}]
    with pytest.raises(ConfigError):
        context(tmp_path, kb_dir, decompilers=bad)


def test_embedding_model_mismatch_is_config_error(tmp_path, kb_dir):
    with pytest.raises(ConfigError):
        context(tmp_path, kb_dir, embedding={"model_id": "other-model"})


def _variant(src: Path, dest: Path, tag: str) -> Path:
    make_jar(src, dest)
    with zipfile.ZipFile(dest, "a") as zf:
        zf.writestr(zipfile.ZipInfo("META-INF/tag.txt", (2012, 8, 26, 0, 0, 0)), tag)
    return dest


@pytest.fixture(scope="module")
def ten_jars(tmp_path_factory):
    root = tmp_path_factory.mktemp("ten")
    paths = [make_jar(d, root / f"{d.name}.jar") for d in sorted(SAMPLES.iterdir())]
    paths += [_variant(SAMPLES / n, root / f"{n}-v.jar", n) for n in MALICIOUS[:3]]
    empty = root / "empty.jar"
    with zipfile.ZipFile(empty, "w") as zf:
        zf.writestr(zipfile.ZipInfo("META-INF/MANIFEST.MF", (2012, 8, 26, 0, 0, 0)), "Manifest-Version: 1.0\n")
    return paths + [empty]


@pytest.mark.parametrize("workers", [1, 4])
def test_batch_counts(tmp_path, kb_dir, ten_jars, workers):
    ctx = context(tmp_path, kb_dir)
    entries = [ManifestEntry("path", str(p)) for p in ten_jars]
    summary = run_batch(entries, ctx, workers, tmp_path / "out")
    assert (summary.done, summary.failed, summary.excluded) == (9, 0, 1)
    assert len(list((tmp_path / "out").glob("*.report.json"))) == 10
    assert summary.total_cost_pico == sum(summary.per_file_cost_pico.values())
    assert "cost per file (mean)" in summary.render()


def test_batch_worker_count_does_not_change_reports(tmp_path, kb_dir, ten_jars):
    entries = [ManifestEntry("path", str(p)) for p in ten_jars]
    blobs = []
    for w in (1, 4):
        ctx = context(tmp_path / f"w{w}", kb_dir)
        run_batch(entries, ctx, w, tmp_path / f"out{w}")
        blobs.append({p.name: p.read_bytes() for p in (tmp_path / f"out{w}").glob("*.json")})
    assert blobs[0].keys() == blobs[1].keys()
    for name in blobs[0]:
        a = json.loads(blobs[0][name])
        b = json.loads(blobs[1][name])
        # the config snapshot names per-test counter paths
        a["metadata"].pop("config"), b["metadata"].pop("config")
        a.pop("decompile"), b.pop("decompile")
        assert a == b


def test_batch_resume_skips_finished(tmp_path, kb_dir, jars):
    journal = Journal(tmp_path / "journal.jsonl")
    entries = [ManifestEntry("path", str(jars[n])) for n in ("gondvv", "jmxbean")]
    run_batch(entries, context(tmp_path, kb_dir), 1, tmp_path / "out", journal=journal)
    counter = tmp_path / "stub-primary.count"
    before = counter.read_text().count("\n")
    summary = run_batch(entries, context(tmp_path, kb_dir), 1, tmp_path / "out", journal=journal)
    assert summary.done == 2
    assert counter.read_text().count("\n") == before
    states = journal.replay()
    assert {i.state for i in states.values()} == {"done"}


def test_resume_requeues_interrupted_item(tmp_path, kb_dir, jars):
    journal = Journal(tmp_path / "journal.jsonl")
    sha = hashlib.sha256(jars["gondvv"].read_bytes()).hexdigest()
    item = WorkItem(sha, "queued_analysis", 0, str(jars["gondvv"]))
    journal.record(item.advance("analyzing"))
    with open(journal.path, "a") as fh:
        fh.write('{"sha256": "torn')
    summary = run_batch([ManifestEntry("path", str(jars["gondvv"]))], context(tmp_path, kb_dir), 1,
                        tmp_path / "out", journal=journal)
    assert summary.done == 1
    assert journal.replay()[sha].attempts == 2


def test_unreadable_path_gets_failed_report(tmp_path, kb_dir):
    summary = run_batch([ManifestEntry("path", str(tmp_path / "missing.jar"))],
                        context(tmp_path, kb_dir), 1, tmp_path / "out")
    assert summary.failed == 1
    (report,) = load_reports(tmp_path / "out")
    assert report.failure["stage"] == "input"


def test_state_machine():
    item = WorkItem("a" * 64)
    with pytest.raises(TransitionError):
        item.advance("analyzing")
    item.advance("downloaded").advance("queued_analysis").advance("analyzing").advance("done")
    assert item.terminal and item.attempts == 1
    with pytest.raises(TransitionError):
        item.advance("analyzing")
    with pytest.raises(ValueError):
        WorkItem("a" * 64, "bogus")


def test_manifest_parsing(tmp_path):
    (tmp_path / "x.jar").write_bytes(b"")
    h = "AB" * 32
    text = f"# comment\n{h}\n\nx.jar\n{h.lower()}\n  x.jar  # again\n"
    entries = parse_manifest_text(text, tmp_path)
    assert entries == [ManifestEntry("hash", h.lower()), ManifestEntry("path", str(tmp_path / "x.jar"))]


def _payloads(n):
    return {hashlib.sha256(f"jar{i}".encode()).hexdigest(): f"jar{i}".encode() for i in range(n)}


def _fetcher(tmp_path, handler, clock, ceiling=2, **kw):
    limiter = RequestRateLimiter(ceiling, 1.0, clock=clock, sleep=clock.sleep)
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return SampleFetcher("https://repo.test/get/{sha256}", tmp_path / "dl", limiter,
                         auth_value="secret", client=client, **kw)


def test_download_rate_limit_on_virtual_clock(tmp_path):
    payloads = _payloads(5)
    seen = []

    def handler(request):
        seen.append((clock.now, request.headers.get("authorization")))
        return httpx.Response(200, content=payloads[request.url.path.rsplit("/", 1)[1]])
    clock = VirtualClock()
    fetcher = _fetcher(tmp_path, handler, clock)
    ready, failed = [], []
    download_worker([WorkItem(s) for s in payloads], fetcher, ready.append, failed.append)
    assert len(ready) == 5 and not failed
    assert clock.now >= 2.0
    times = [t for t, _ in seen]
    assert all(sum(1 for u in times if t - 1.0 < u <= t) <= 2 for t in times)
    assert {a for _, a in seen} == {"secret"}
    assert all(Path(i.source).read_bytes() == payloads[i.sha256] for i in ready)


def test_download_hash_mismatch_fails_item(tmp_path):
    sha = hashlib.sha256(b"expected").hexdigest()
    clock = VirtualClock()
    fetcher = _fetcher(tmp_path, lambda r: httpx.Response(200, content=b"tampered"), clock)
    ready, failed = [], []
    download_worker([WorkItem(sha)], fetcher, ready.append, failed.append)
    assert not ready and failed[0].state == "failed"
    assert "mismatch" in failed[0].detail
    assert not (tmp_path / "dl" / f"{sha}.jar").exists()


def test_download_retries_server_errors(tmp_path):
    payloads = _payloads(1)
    calls = []

    def handler(request):
        calls.append(1)
        if len(calls) < 3:
            return httpx.Response(503)
        return httpx.Response(200, content=next(iter(payloads.values())))
    clock = VirtualClock()
    result = _fetcher(tmp_path, handler, clock).fetch(next(iter(payloads)))
    assert result.ok and len(calls) == 3
    assert not _fetcher(tmp_path, lambda r: httpx.Response(404), clock).fetch("0" * 64).ok


def test_batch_downloads_by_hash(tmp_path, kb_dir, jars):
    blob = jars["soundbank"].read_bytes()
    sha = hashlib.sha256(blob).hexdigest()
    clock = VirtualClock()
    fetcher = _fetcher(tmp_path, lambda r: httpx.Response(200, content=blob), clock)
    summary = run_batch([ManifestEntry("hash", sha), ManifestEntry("hash", "f" * 64)],
                        context(tmp_path, kb_dir), 2, tmp_path / "out", fetcher=fetcher)
    assert (summary.done, summary.failed) == (1, 1)
    reports = {r.file_sha256: r for r in load_reports(tmp_path / "out")}
    assert reports[sha].matched_cve == "CVE-2009-3867"
    assert reports["f" * 64].failure["stage"] == "download"
