from __future__ import annotations

import json
import shlex
import sys
import zipfile
from pathlib import Path

import pytest

from malcve.clock import fixed_clock
from malcve.config import Config
from malcve.embeddings import EmbeddingConfig, LocalHashEmbedder
from malcve.kb import KnowledgeBase

FIXTURES = Path(__file__).parent / "fixtures"
SAMPLES = FIXTURES / "samples"
STUB = FIXTURES / "bin" / "stub_decompiler.py"
FIXED_TIME = "2024-05-01T12:00:00Z"
MALICIOUS = ("gondvv", "jmxbean", "cmmraster", "trustchain", "soundbank")


def make_jar(src_dir: Path, dest: Path) -> Path:
    """Zip a source tree with fixed timestamps so the bytes (and sha256) are stable."""
    dest.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(dest, "w", compression=zipfile.ZIP_STORED) as zf:
        for path in sorted(p for p in src_dir.rglob("*") if p.is_file()):
            info = zipfile.ZipInfo(path.relative_to(src_dir).as_posix(), (2012, 8, 26, 0, 0, 0))
            zf.writestr(info, path.read_bytes())
    return dest


def stub_command(mode: str = "ok", counter: Path | None = None) -> str:
    parts = [sys.executable, str(STUB), "{jar}", "{outdir}", "--mode", mode]
    if counter is not None:
        parts += ["--counter", str(counter)]
    return shlex.join(parts)


def decompilers(primary: str = "ok", fallback: str = "ok", counter_dir: Path | None = None) -> list[dict]:
    out = []
    for name, role, mode in (("stub-primary", "primary", primary), ("stub-fallback", "fallback", fallback)):
        counter = counter_dir / f"{name}.count" if counter_dir is not None else None
        out.append({"name": name, "command": stub_command(mode, counter), "timeout": 30, "role": role})
    return out


def fixture_config(tmp: Path, **overrides) -> Config:
    data = {
        "decompilers": decompilers(counter_dir=tmp),
        "llm_backend": {"kind": "mock", "script": str(FIXTURES / "mock_llm.json")},
    }
    data.update(overrides)
    return Config.from_dict(data, tmp)


@pytest.fixture(scope="session")
def feed() -> dict:
    return json.loads((FIXTURES / "nvd_feed.json").read_text("utf-8"))


@pytest.fixture(scope="session")
def planted() -> dict:
    return json.loads((FIXTURES / "planted.json").read_text("utf-8"))


@pytest.fixture(scope="session")
def kb_dir(tmp_path_factory, feed) -> Path:
    path = tmp_path_factory.mktemp("kb")
    kb = KnowledgeBase.create(path, "hashed-bow-v1", 1536, clock=fixed_clock(FIXED_TIME))
    kb.ingest_feed(feed, LocalHashEmbedder(EmbeddingConfig()))
    return path


@pytest.fixture(scope="session")
def jars(tmp_path_factory) -> dict[str, Path]:
    root = tmp_path_factory.mktemp("jars")
    return {d.name: make_jar(d, root / f"{d.name}.jar") for d in sorted(SAMPLES.iterdir())}


# Acceptance bookkeeping: tests marked ``criterion(n, title)`` roll up into
# one PASS/FAIL line per criterion at the end of the run.

_criteria: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or (report.when != "call" and report.passed):
        return
    number, title = marker.args
    entry = _criteria.setdefault(number, {"title": title, "ok": True, "failed": []})
    if not report.passed:
        entry["ok"] = False
        entry["failed"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        entry = _criteria[number]
        status = "PASS" if entry["ok"] else "FAIL"
        line = f"criterion {number:>2}: {status}  {entry['title']}"
        if entry["failed"]:
            line += f"  (failed: {', '.join(entry['failed'])})"
        terminalreporter.write_line(line)
