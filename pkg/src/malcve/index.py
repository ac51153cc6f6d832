"""Cosine nearest-neighbour search over CVE description vectors.

``ExactIndex`` scans every vector and is the reference ranking.  ``HnswIndex``
wraps hnswlib's graph index for large knowledge bases.  Both return hits in
descending similarity with ties broken by ascending cve_id, and both report
similarities recomputed in float64 from the stored vectors so the two engines
agree on scores for the ids they return.
"""
from __future__ import annotations

import json
import threading
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, MalcveError

DEFAULT_K = 100
META_FILE = "index.meta.json"
HNSW_BLOB = "index.hnsw"


class VectorIndexError(MalcveError):
    pass


class DimensionMismatch(VectorIndexError, ValueError):
    pass


@dataclass(frozen=True)
class SearchHit:
    cve_id: str
    similarity: float
    query_index: int = 0


@dataclass(frozen=True)
class AggregatedHit:
    cve_id: str
    max_similarity: float
    contributing_queries: tuple[int, ...] = field(default_factory=tuple)


def _unit_rows(vectors: np.ndarray) -> np.ndarray:
    mat = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return mat / norms


def _unit(vec: np.ndarray) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64).ravel()
    n = np.linalg.norm(v)
    return v / n if n else v


class _Base:
    engine = ""

    def __init__(self, ids: Sequence[str], vectors: np.ndarray):
        vectors = np.asarray(vectors)
        if vectors.ndim != 2 or len(ids) != vectors.shape[0]:
            raise VectorIndexError(f"{len(ids)} ids for vector block of shape {vectors.shape}")
        if len(set(ids)) != len(ids):
            raise VectorIndexError("duplicate cve_id in index input")
        self.ids = list(ids)
        self.dim = vectors.shape[1]
        self._unit = _unit_rows(vectors)
        self._id_arr = np.array(self.ids, dtype=object)

    def __len__(self) -> int:
        return len(self.ids)

    def _check_query(self, query_vector) -> np.ndarray:
        q = np.asarray(query_vector)
        if q.ndim != 1 or q.shape[0] != self.dim:
            raise DimensionMismatch(
                f"query has dim {q.shape[-1] if q.ndim else 0}, index has dim {self.dim}")
        if not len(self.ids):
            raise VectorIndexError("cannot search an empty index")
        return _unit(q)

    def _rank(self, rows: np.ndarray, sims: np.ndarray, k: int, query_index: int) -> list[SearchHit]:
        order = np.lexsort((self._id_arr[rows], -sims))[:k]
        return [SearchHit(self.ids[rows[i]], float(sims[i]), query_index) for i in order]

    def search(self, query_vector, k: int = DEFAULT_K, query_index: int = 0) -> list[SearchHit]:
        raise NotImplementedError

    def search_many(self, query_vectors: Iterable, k: int = DEFAULT_K) -> list[list[SearchHit]]:
        return [self.search(q, k, i) for i, q in enumerate(query_vectors)]


class ExactIndex(_Base):
    """Full scan plus partial sort."""

    engine = "exact"

    def search(self, query_vector, k: int = DEFAULT_K, query_index: int = 0) -> list[SearchHit]:
        if k <= 0:
            raise ValueError("k must be positive")
        q = self._check_query(query_vector)
        sims = self._unit @ q
        n = len(sims)
        if k < n:
            cut = np.partition(sims, n - k)[n - k]
            # keep everything tied with the k-th score so ids decide the order
            rows = np.flatnonzero(sims >= cut)
        else:
            rows = np.arange(n)
        return self._rank(rows, sims[rows], k, query_index)

    def save(self, directory: Path | str) -> None:
        _write_meta(Path(directory), self, {})


class HnswIndex(_Base):
    """Graph-based approximate search (hnswlib, inner product on unit vectors)."""

    engine = "hnsw"

    def __init__(self, ids: Sequence[str], vectors: np.ndarray, m: int = 16,
                 ef_construction: int = 200, ef_search: int = 128, seed: int = 0,
                 _graph=None):
        import hnswlib

        super().__init__(ids, vectors)
        self.m = m
        self.ef_construction = ef_construction
        self.ef_search = ef_search
        self.seed = seed
        self._query_lock = threading.Lock()
        if _graph is not None:
            self._graph = _graph
        else:
            self._graph = hnswlib.Index(space="ip", dim=self.dim)
            self._graph.init_index(max_elements=max(1, len(self.ids)), M=m,
                                   ef_construction=ef_construction, random_seed=seed)
            # single thread keeps graph construction reproducible
            self._graph.set_num_threads(1)
            if len(self.ids):
                self._graph.add_items(self._unit.astype(np.float32), np.arange(len(self.ids)))

    def search(self, query_vector, k: int = DEFAULT_K, query_index: int = 0) -> list[SearchHit]:
        if k <= 0:
            raise ValueError("k must be positive")
        q = self._check_query(query_vector)
        k_eff = min(k, len(self.ids))
        with self._query_lock:
            self._graph.set_ef(max(self.ef_search, k_eff))
            labels, _ = self._graph.knn_query(q.astype(np.float32)[None, :], k=k_eff)
        rows = np.asarray(labels[0], dtype=np.int64)
        return self._rank(rows, self._unit[rows] @ q, k, query_index)

    def params(self) -> dict:
        return {"m": self.m, "ef_construction": self.ef_construction,
                "ef_search": self.ef_search, "seed": self.seed}

    def save(self, directory: Path | str) -> None:
        directory = Path(directory)
        _write_meta(directory, self, self.params())
        self._graph.save_index(str(directory / HNSW_BLOB))


def _write_meta(directory: Path, index: _Base, params: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "engine": index.engine,
        "embedding_dim": index.dim,
        "record_count": len(index),
        "params": params,
    }
    (directory / META_FILE).write_text(json.dumps(meta, indent=2) + "\n", "utf-8")


def build_index(snapshot, engine: str = "exact", **params) -> ExactIndex | HnswIndex:
    """Build an index over a KbSnapshot (row order = snapshot record order)."""
    if engine == "exact":
        return ExactIndex(snapshot.ids, snapshot.vectors)
    if engine == "hnsw":
        return HnswIndex(snapshot.ids, snapshot.vectors, **params)
    raise ConfigError(f"unknown index engine {engine!r}")


def load_index(directory: Path | str, snapshot) -> ExactIndex | HnswIndex:
    """Load a persisted index, checking it against the KB manifest."""
    import hnswlib

    directory = Path(directory)
    meta = json.loads((directory / META_FILE).read_text("utf-8"))
    manifest = snapshot.manifest
    if meta["embedding_dim"] != manifest.embedding_dim:
        raise DimensionMismatch(
            f"index dim {meta['embedding_dim']} != KB dim {manifest.embedding_dim}")
    if meta["record_count"] != manifest.record_count:
        raise VectorIndexError(
            f"index holds {meta['record_count']} records, KB has {manifest.record_count}")
    if meta["engine"] == "exact":
        return ExactIndex(snapshot.ids, snapshot.vectors)
    if meta["engine"] == "hnsw":
        graph = hnswlib.Index(space="ip", dim=manifest.embedding_dim)
        graph.load_index(str(directory / HNSW_BLOB), max_elements=max(1, manifest.record_count))
        graph.set_num_threads(1)
        return HnswIndex(snapshot.ids, snapshot.vectors, _graph=graph, **meta["params"])
    raise VectorIndexError(f"unknown index engine {meta['engine']!r}")


def aggregate_max(hits_per_query: Iterable[Iterable[SearchHit | AggregatedHit]]) -> list[AggregatedHit]:
    """Collapse per-query hit lists to one entry per CVE holding its best score.

    Accepts its own output as input, which makes the operation idempotent.
    """
    best: dict[str, float] = {}
    queries: dict[str, set[int]] = {}
    for hits in hits_per_query:
        for hit in hits:
            if isinstance(hit, AggregatedHit):
                score, qs = hit.max_similarity, hit.contributing_queries
            else:
                score, qs = hit.similarity, (hit.query_index,)
            if hit.cve_id not in best or score > best[hit.cve_id]:
                best[hit.cve_id] = score
            queries.setdefault(hit.cve_id, set()).update(qs)
    out = [AggregatedHit(cid, s, tuple(sorted(queries[cid]))) for cid, s in best.items()]
    out.sort(key=lambda h: (-h.max_similarity, h.cve_id))
    return out
