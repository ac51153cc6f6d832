from __future__ import annotations

import copy
import json
import threading
from datetime import datetime, timezone

import numpy as np
import pytest

from malcve.clock import fixed_clock
from malcve.embeddings import EmbeddingConfig, EmbeddingError, LocalHashEmbedder
from malcve.errors import ConfigError
from malcve.kb import KnowledgeBase, RefreshError
from malcve.nvd import NvdFetchError

from conftest import FIXED_TIME


def _kb(path):
    return KnowledgeBase.create(path, "hashed-bow-v1", 1536, clock=fixed_clock(FIXED_TIME))


def _files(path):
    return {name: (path / name).read_bytes() for name in ("manifest.json", "records.jsonl", "vectors.bin")}


def test_ingest_counts_and_layout(tmp_path, feed):
    kb = _kb(tmp_path)
    stats = kb.ingest_feed(feed, LocalHashEmbedder())
    assert (stats.inserted, stats.updated, stats.skipped) == (30, 0, 2)
    assert stats.skip_reasons["CVE-2013-9999"] == "rejected"
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["record_count"] == 30 and manifest["embedding_dim"] == 1536
    assert (tmp_path / "vectors.bin").stat().st_size == 30 * 1536 * 4
    ids = [json.loads(l)["cve_id"] for l in (tmp_path / "records.jsonl").read_text().splitlines()]
    assert ids == sorted(ids)


def test_reingest_is_idempotent_bytewise(tmp_path, feed):
    kb = _kb(tmp_path)
    kb.ingest_feed(feed, LocalHashEmbedder())
    before = _files(tmp_path)
    stats = kb.ingest_feed(feed, LocalHashEmbedder())
    assert (stats.inserted, stats.updated) == (0, 0)
    assert _files(tmp_path) == before


def test_update_semantics(tmp_path, feed):
    kb = _kb(tmp_path)
    kb.ingest_feed(feed, LocalHashEmbedder())
    old_vec = kb.get("CVE-2013-1493").description_vector.copy()
    changed = copy.deepcopy(feed)
    cve = changed["vulnerabilities"][2]["cve"]
    cve["weaknesses"] = [{"description": [{"value": "CWE-119"}]}]
    stats = kb.ingest_feed(changed, LocalHashEmbedder())
    assert stats.updated == 1
    rec = kb.get("CVE-2013-1493")
    assert rec.cwe_ids == ("CWE-119",)
    assert np.array_equal(rec.description_vector, old_vec)
    cve["descriptions"] = [{"lang": "en", "value": "rewritten description"}]
    kb.ingest_feed(changed, LocalHashEmbedder())
    assert not np.array_equal(kb.get("CVE-2013-1493").description_vector, old_vec)


def test_load_round_trip_and_dim_check(tmp_path, feed):
    kb = _kb(tmp_path)
    kb.ingest_feed(feed, LocalHashEmbedder())
    again = KnowledgeBase.load(tmp_path, expected_dim=1536)
    assert again.records == kb.records
    with pytest.raises(ConfigError):
        KnowledgeBase.load(tmp_path, expected_dim=768)


def test_get_by_cwe(tmp_path, feed):
    kb = _kb(tmp_path)
    kb.ingest_feed(feed, LocalHashEmbedder())
    ids = [r.cve_id for r in kb.get_by_cwe("CWE-787")]
    assert ids == ["CVE-2013-1493", "CVE-2013-2465"]


def test_embedder_mismatch_refused(tmp_path, feed):
    kb = _kb(tmp_path)
    with pytest.raises(ConfigError):
        kb.ingest_feed(feed, LocalHashEmbedder(EmbeddingConfig(dim=64)))


class _Flaky(LocalHashEmbedder):
    def embed_batch(self, texts):
        raise EmbeddingError("batch down")

    def embed_text(self, text):
        if "OpenSSL" in text:
            raise EmbeddingError("bad text")
        return super().embed_text(text)


def test_embedding_failures_become_skips(tmp_path, feed):
    stats = _kb(tmp_path).ingest_feed(feed, _Flaky())
    assert stats.inserted == 29
    assert stats.skip_reasons["CVE-2014-0160"].startswith("embedding failed")


class _FakeClient:
    def __init__(self, doc=None, error=None):
        self.doc, self.error = doc, error

    def fetch_modified(self, since, until):
        if self.error:
            raise self.error
        return self.doc


def test_refresh_failure_leaves_kb_unchanged(tmp_path, feed):
    kb = _kb(tmp_path)
    kb.ingest_feed(feed, LocalHashEmbedder())
    before = _files(tmp_path)
    with pytest.raises(RefreshError):
        kb.refresh(datetime(2024, 1, 1, tzinfo=timezone.utc), _FakeClient(error=NvdFetchError("down")),
                   LocalHashEmbedder())
    assert _files(tmp_path) == before


def test_refresh_success_stamps_time(tmp_path, feed):
    kb = _kb(tmp_path)
    now = datetime(2024, 6, 1, tzinfo=timezone.utc)
    stats = kb.refresh(datetime(2024, 1, 1, tzinfo=timezone.utc), _FakeClient(feed), LocalHashEmbedder(), now=now)
    assert stats.inserted == 30
    assert kb.manifest.last_refresh == "2024-06-01T00:00:00Z"


def test_readers_see_whole_snapshots(tmp_path, feed):
    kb = _kb(tmp_path)
    seen = []
    stop = threading.Event()

    def reader():
        while not stop.is_set():
            snap = kb.snapshot()
            seen.append((snap.manifest.record_count, len(snap.records), snap.vectors.shape[0]))

    t = threading.Thread(target=reader)
    t.start()
    kb.ingest_feed(feed, LocalHashEmbedder())
    stop.set()
    t.join()
    assert all(a == b == c for a, b, c in seen)
