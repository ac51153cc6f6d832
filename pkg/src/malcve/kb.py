"""CVE knowledge base: NVD ingestion, embedding, and on-disk persistence.

Layout under the KB directory::

    manifest.json   KbManifest
    records.jsonl   one CveRecord per line, ascending cve_id
    vectors.bin     little-endian float32, row i <-> line i of records.jsonl
"""
from __future__ import annotations

import json
import logging
import os
import threading
from collections.abc import Iterable, Sequence
from dataclasses import asdict, dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np
from filelock import FileLock

from .clock import Clock, format_ts, utcnow
from .embeddings import EmbeddingError, EmbeddingProvider
from .errors import ConfigError, MalcveError
from .nvd import NvdClient, NvdEntry, parse_feed

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
RECORDS = "records.jsonl"
VECTORS = "vectors.bin"


class KbError(MalcveError):
    pass


class RefreshError(KbError):
    pass


@dataclass(frozen=True, eq=False)
class CveRecord:
    cve_id: str
    description: str
    description_vector: np.ndarray
    cwe_ids: tuple[str, ...] = ()
    cvss_vector: str = ""
    cvss_score: float | None = None

    def __post_init__(self):
        vec = np.array(self.description_vector, dtype=np.float32)
        vec.flags.writeable = False
        object.__setattr__(self, "description_vector", vec)
        object.__setattr__(self, "cwe_ids", tuple(self.cwe_ids))

    def __eq__(self, other):
        if not isinstance(other, CveRecord):
            return NotImplemented
        return (self.meta() == other.meta()
                and self.description_vector.tobytes() == other.description_vector.tobytes())

    def __hash__(self):
        return hash(self.cve_id)

    def meta(self) -> dict:
        return {
            "cve_id": self.cve_id,
            "description": self.description,
            "cwe_ids": list(self.cwe_ids),
            "cvss_vector": self.cvss_vector,
            "cvss_score": self.cvss_score,
        }


@dataclass
class KbManifest:
    record_count: int
    embedding_model_id: str
    embedding_dim: int
    last_refresh: str
    source_feed_version: str = ""


@dataclass
class IngestStats:
    inserted: int = 0
    updated: int = 0
    skipped: int = 0
    skip_reasons: dict[str, str] = field(default_factory=dict)

    def as_dict(self) -> dict:
        return {"inserted": self.inserted, "updated": self.updated, "skipped": self.skipped}


@dataclass(frozen=True)
class KbSnapshot:
    """Immutable view handed to readers; safe to share across threads."""

    manifest: KbManifest
    records: tuple[CveRecord, ...]
    vectors: np.ndarray
    by_id: dict[str, int]

    def get(self, cve_id: str) -> CveRecord | None:
        i = self.by_id.get(cve_id)
        return None if i is None else self.records[i]

    def get_by_cwe(self, cwe_id: str) -> list[CveRecord]:
        return [r for r in self.records if cwe_id in r.cwe_ids]

    @property
    def ids(self) -> list[str]:
        return [r.cve_id for r in self.records]


def _build_snapshot(manifest: KbManifest, records: Iterable[CveRecord]) -> KbSnapshot:
    ordered = tuple(sorted(records, key=lambda r: r.cve_id))
    if ordered:
        vectors = np.stack([r.description_vector for r in ordered]).astype(np.float32)
    else:
        vectors = np.zeros((0, manifest.embedding_dim), dtype=np.float32)
    vectors.flags.writeable = False
    return KbSnapshot(manifest, ordered, vectors, {r.cve_id: i for i, r in enumerate(ordered)})


class KnowledgeBase:
    """Single-writer store of CveRecords.

    Writers (``ingest_feed``/``refresh``) take an in-process lock plus a file
    lock on the directory; readers work from ``snapshot()``, which is swapped
    atomically after each committed write.
    """

    def __init__(self, path: Path | str | None, manifest: KbManifest,
                 records: Sequence[CveRecord] = (), clock: Clock = utcnow):
        self.path = Path(path) if path is not None else None
        self.clock = clock
        self._lock = threading.Lock()
        self._snap = _build_snapshot(manifest, records)
        self._check(self._snap)

    # construction / persistence

    @classmethod
    def create(cls, path: Path | str | None, embedding_model_id: str, dim: int,
               clock: Clock = utcnow) -> KnowledgeBase:
        manifest = KbManifest(0, embedding_model_id, dim, format_ts(clock()), "")
        kb = cls(path, manifest, (), clock)
        if kb.path is not None:
            kb.save()
        return kb

    @classmethod
    def load(cls, path: Path | str, expected_dim: int | None = None,
             clock: Clock = utcnow) -> KnowledgeBase:
        path = Path(path)
        if not (path / MANIFEST).is_file():
            raise ConfigError(f"no knowledge base at {path}")
        manifest = KbManifest(**json.loads((path / MANIFEST).read_text("utf-8")))
        if expected_dim is not None and expected_dim != manifest.embedding_dim:
            raise ConfigError(
                f"embedding dim mismatch: KB has {manifest.embedding_dim}, config wants {expected_dim}")
        lines = [ln for ln in (path / RECORDS).read_text("utf-8").splitlines() if ln.strip()]
        raw = np.fromfile(path / VECTORS, dtype="<f4")
        dim = manifest.embedding_dim
        if raw.size != len(lines) * dim:
            raise KbError(f"vectors.bin holds {raw.size} floats, expected {len(lines)} x {dim}")
        matrix = raw.reshape(len(lines), dim) if lines else raw.reshape(0, dim)
        records = []
        for row, line in zip(matrix, lines):
            meta = json.loads(line)
            records.append(CveRecord(
                cve_id=meta["cve_id"],
                description=meta["description"],
                description_vector=row,
                cwe_ids=tuple(meta.get("cwe_ids", ())),
                cvss_vector=meta.get("cvss_vector", ""),
                cvss_score=meta.get("cvss_score"),
            ))
        return cls(path, manifest, records, clock)

    @classmethod
    def open(cls, path: Path | str, embedding_model_id: str, dim: int,
             clock: Clock = utcnow) -> KnowledgeBase:
        path = Path(path)
        if (path / MANIFEST).is_file():
            kb = cls.load(path, expected_dim=dim, clock=clock)
            if kb.manifest.embedding_model_id != embedding_model_id:
                raise ConfigError(
                    f"KB embedded with {kb.manifest.embedding_model_id!r}, not {embedding_model_id!r}")
            return kb
        path.mkdir(parents=True, exist_ok=True)
        return cls.create(path, embedding_model_id, dim, clock)

    def save(self) -> None:
        if self.path is None:
            return
        self.path.mkdir(parents=True, exist_ok=True)
        snap = self._snap
        body = "".join(json.dumps(r.meta(), ensure_ascii=False) + "\n" for r in snap.records)
        self._write(RECORDS, body.encode("utf-8"))
        self._write(VECTORS, snap.vectors.astype("<f4").tobytes())
        self._write(MANIFEST, (json.dumps(asdict(snap.manifest), indent=2) + "\n").encode("utf-8"))

    def _write(self, name: str, data: bytes) -> None:
        tmp = self.path / f".{name}.tmp"
        tmp.write_bytes(data)
        os.replace(tmp, self.path / name)

    def _check(self, snap: KbSnapshot) -> None:
        if snap.manifest.record_count != len(snap.records):
            raise KbError(
                f"manifest lists {snap.manifest.record_count} records, found {len(snap.records)}")
        if snap.vectors.shape[1] != snap.manifest.embedding_dim:
            raise KbError(f"vector dim {snap.vectors.shape[1]} != {snap.manifest.embedding_dim}")

    # readers

    def snapshot(self) -> KbSnapshot:
        return self._snap

    @property
    def manifest(self) -> KbManifest:
        return self._snap.manifest

    @property
    def records(self) -> tuple[CveRecord, ...]:
        return self._snap.records

    def get(self, cve_id: str) -> CveRecord | None:
        return self._snap.get(cve_id)

    def get_by_cwe(self, cwe_id: str) -> list[CveRecord]:
        """All records tagged with *cwe_id*, ascending by cve_id."""
        return self._snap.get_by_cwe(cwe_id)

    # writers

    def _writer(self):
        if self.path is None:
            return self._lock
        self.path.mkdir(parents=True, exist_ok=True)
        return _Lease(self._lock, FileLock(str(self.path / ".writer.lock")))

    def ingest_feed(self, feed_document: dict, embedder: EmbeddingProvider,
                    feed_version: str | None = None) -> IngestStats:
        """Insert or update every usable entry of an NVD 2.0 document."""
        entries = parse_feed(feed_document)
        with self._writer():
            stats, snap = self._ingest(entries, embedder, feed_version
                                       or str(feed_document.get("timestamp", "")))
            self._commit(snap)
        return stats

    def refresh(self, since: datetime, feed_client: NvdClient, embedder: EmbeddingProvider,
                now: datetime | None = None) -> IngestStats:
        """Fetch entries modified after *since* and ingest them.

        Any fetch failure leaves the KB untouched.
        """
        until = now or self.clock()
        try:
            document = feed_client.fetch_modified(since, until)
        except MalcveError as exc:
            raise RefreshError(f"refresh failed, knowledge base unchanged: {exc}") from exc
        entries = parse_feed(document)
        with self._writer():
            stats, snap = self._ingest(entries, embedder, self.manifest.source_feed_version)
            snap.manifest.last_refresh = format_ts(until)
            self._commit(snap)
        return stats

    def _commit(self, snap: KbSnapshot) -> None:
        self._check(snap)
        self._snap = snap
        self.save()

    def _ingest(self, entries: list[NvdEntry], embedder: EmbeddingProvider,
                feed_version: str) -> tuple[IngestStats, KbSnapshot]:
        manifest = self.manifest
        if embedder.config.dim != manifest.embedding_dim:
            raise ConfigError(
                f"embedder dim {embedder.config.dim} != KB dim {manifest.embedding_dim}")
        if embedder.config.model_id != manifest.embedding_model_id:
            raise ConfigError(
                f"embedder {embedder.config.model_id!r} != KB model {manifest.embedding_model_id!r}")

        stats = IngestStats()
        current = {r.cve_id: r for r in self._snap.records}
        existed = set(current)
        to_embed: list[NvdEntry] = []
        touched: set[str] = set()

        for entry in entries:
            if entry.rejected:
                stats.skipped += 1
                stats.skip_reasons[entry.cve_id] = "rejected"
                continue
            if not entry.description:
                stats.skipped += 1
                stats.skip_reasons[entry.cve_id] = "no English description"
                continue
            old = current.get(entry.cve_id)
            if old is not None and old.description == entry.description:
                meta_changed = (old.cwe_ids != tuple(entry.cwe_ids)
                                or old.cvss_vector != entry.cvss_vector
                                or old.cvss_score != entry.cvss_score)
                if not meta_changed:
                    stats.skipped += 1
                    stats.skip_reasons[entry.cve_id] = "unchanged"
                    continue
                current[entry.cve_id] = CveRecord(
                    entry.cve_id, entry.description, old.description_vector,
                    tuple(entry.cwe_ids), entry.cvss_vector, entry.cvss_score)
                touched.add(entry.cve_id)
                continue
            to_embed.append(entry)

        # a later duplicate in the same feed wins
        pending = {e.cve_id: e for e in to_embed}
        vectors = self._embed([e.description for e in pending.values()], embedder)
        for entry, vec in zip(pending.values(), vectors):
            if isinstance(vec, str):
                stats.skipped += 1
                stats.skip_reasons[entry.cve_id] = vec
                continue
            current[entry.cve_id] = CveRecord(
                entry.cve_id, entry.description, vec,
                tuple(entry.cwe_ids), entry.cvss_vector, entry.cvss_score)
            touched.add(entry.cve_id)

        for cve_id in touched:
            if cve_id in existed:
                stats.updated += 1
            else:
                stats.inserted += 1

        new_manifest = KbManifest(
            record_count=len(current),
            embedding_model_id=manifest.embedding_model_id,
            embedding_dim=manifest.embedding_dim,
            last_refresh=manifest.last_refresh,
            source_feed_version=feed_version or manifest.source_feed_version,
        )
        return stats, _build_snapshot(new_manifest, current.values())

    def _embed(self, texts: list[str], embedder: EmbeddingProvider) -> list[np.ndarray | str]:
        """Embed in provider-sized chunks; failures come back as reason strings."""
        out: list[np.ndarray | str] = []
        size = max(1, embedder.config.request_batch_size)
        for start in range(0, len(texts), size):
            chunk = texts[start:start + size]
            try:
                out.extend(embedder.embed_batch(chunk))
                continue
            except EmbeddingError:
                pass
            for text in chunk:
                try:
                    out.append(embedder.embed_text(text))
                except EmbeddingError as exc:
                    logger.warning("embedding failed: %s", exc)
                    out.append(f"embedding failed: {exc}")
        dim = self.manifest.embedding_dim
        return [v if isinstance(v, str) or v.shape == (dim,)
                else f"embedding has dim {v.shape}, expected {dim}" for v in out]


class _Lease:
    def __init__(self, lock: threading.Lock, file_lock: FileLock):
        self.lock = lock
        self.file_lock = file_lock

    def __enter__(self):
        self.lock.acquire()
        try:
            self.file_lock.acquire()
        except BaseException:
            self.lock.release()
            raise
        return self

    def __exit__(self, *exc):
        self.file_lock.release()
        self.lock.release()
        return False
