"""Lexical re-ranking of retrieved CVEs.

Candidates from the vector search are re-scored against the libraries named
in the code summary: library names become one flat BM25 query over the
candidates' descriptions, both signals are min-max normalized, and a weighted
sum gives the final score.  Afterwards the pool is widened with knowledge-base
CVEs that share a CWE with the top results.
"""
from __future__ import annotations

import math
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass

from .errors import ConfigError
from .index import AggregatedHit
from .text import split_tokens

DEFAULT_STOPLIST = frozenset({"java"})
EXPANSION_EPSILON = 1e-6


@dataclass(frozen=True)
class FusionConfig:
    sim_weight: float = 0.7
    bm25_weight: float = 0.3
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    generic_token_stoplist: frozenset[str] = DEFAULT_STOPLIST
    output_top_n: int = 10

    def __post_init__(self):
        object.__setattr__(self, "generic_token_stoplist",
                           frozenset(t.lower() for t in self.generic_token_stoplist))
        if abs(self.sim_weight + self.bm25_weight - 1.0) > 1e-12:
            raise ConfigError(f"fusion weights must sum to 1, got {self.sim_weight} + {self.bm25_weight}")
        if self.bm25_k1 <= 0 or not 0 <= self.bm25_b <= 1:
            raise ConfigError("bm25_k1 must be > 0 and bm25_b within [0, 1]")
        if self.output_top_n <= 0:
            raise ConfigError("output_top_n must be positive")

    def as_dict(self) -> dict:
        return {
            "sim_weight": self.sim_weight,
            "bm25_weight": self.bm25_weight,
            "bm25_k1": self.bm25_k1,
            "bm25_b": self.bm25_b,
            "generic_token_stoplist": sorted(self.generic_token_stoplist),
            "output_top_n": self.output_top_n,
        }


@dataclass(frozen=True)
class RankedCve:
    cve_id: str
    sim_score: float
    bm25_score: float
    norm_sim: float
    norm_bm25: float
    final_score: float
    source: str = "retrieval"
    via_cwe: str | None = None

    def as_dict(self) -> dict:
        out = {
            "cve_id": self.cve_id,
            "sim_score": self.sim_score,
            "bm25_score": self.bm25_score,
            "norm_sim": self.norm_sim,
            "norm_bm25": self.norm_bm25,
            "final_score": self.final_score,
            "source": self.source,
        }
        if self.via_cwe is not None:
            out["via_cwe"] = self.via_cwe
        return out

    @classmethod
    def from_dict(cls, data: Mapping) -> RankedCve:
        return cls(**{k: data[k] for k in (
            "cve_id", "sim_score", "bm25_score", "norm_sim", "norm_bm25", "final_score")},
            source=data.get("source", "retrieval"), via_cwe=data.get("via_cwe"))


def tokenize(text: str, stoplist: Iterable[str] = DEFAULT_STOPLIST) -> list[str]:
    stop = stoplist if isinstance(stoplist, (set, frozenset)) else set(stoplist)
    return [t for t in split_tokens(text) if t not in stop]


class Bm25Corpus:
    """Okapi BM25 over pre-tokenized documents."""

    def __init__(self, docs: Sequence[Sequence[str]], k1: float = 1.2, b: float = 0.75):
        if not docs:
            raise ValueError("BM25 corpus must contain at least one document")
        self.k1 = k1
        self.b = b
        self.tf = [Counter(d) for d in docs]
        self.lengths = [len(d) for d in docs]
        self.n_docs = len(docs)
        self.avgdl = sum(self.lengths) / self.n_docs
        df: Counter[str] = Counter()
        for counts in self.tf:
            df.update(counts.keys())
        self.df = df

    def idf(self, term: str) -> float:
        n_q = self.df.get(term, 0)
        return math.log(1.0 + (self.n_docs - n_q + 0.5) / (n_q + 0.5))

    def score(self, query_tokens: Iterable[str], doc_index: int) -> float:
        counts = self.tf[doc_index]
        length_ratio = self.lengths[doc_index] / self.avgdl if self.avgdl else 0.0
        norm = self.k1 * (1.0 - self.b + self.b * length_ratio)
        total = 0.0
        for term in query_tokens:
            f = counts.get(term, 0)
            if f:
                total += self.idf(term) * f * (self.k1 + 1.0) / (f + norm)
        return total


def bm25_score(query_tokens: Sequence[str], doc_index: int, corpus: Sequence[Sequence[str]],
               k1: float = 1.2, b: float = 0.75) -> float:
    return Bm25Corpus(corpus, k1, b).score(query_tokens, doc_index)


def normalize(scores: Sequence[float]) -> list[float]:
    """Min-max scale into [0, 1]; a constant list maps to all ones."""
    if not scores:
        return []
    lo, hi = min(scores), max(scores)
    if hi == lo:
        return [1.0] * len(scores)
    span = hi - lo
    return [min(1.0, max(0.0, (s - lo) / span)) for s in scores]


def combine(cve_ids: Sequence[str], sim_scores: Sequence[float], bm25_scores: Sequence[float],
            cfg: FusionConfig = FusionConfig()) -> list[RankedCve]:
    """Weighted sum of normalized signals, sorted best first (ties by cve_id)."""
    norm_sim = normalize(sim_scores)
    norm_bm25 = normalize(bm25_scores)
    ranked = [
        RankedCve(cid, float(s), float(b), ns, nb, cfg.sim_weight * ns + cfg.bm25_weight * nb)
        for cid, s, b, ns, nb in zip(cve_ids, sim_scores, bm25_scores, norm_sim, norm_bm25)
    ]
    ranked.sort(key=lambda r: (-r.final_score, r.cve_id))
    return ranked


def library_query(library_names: Iterable[str], cfg: FusionConfig = FusionConfig()) -> list[str]:
    return [t for name in library_names for t in tokenize(name, cfg.generic_token_stoplist)]


def fuse(candidates: Sequence[AggregatedHit], library_names: Iterable[str],
         descriptions: Mapping[str, str], cfg: FusionConfig = FusionConfig()) -> list[RankedCve]:
    """Re-rank aggregated hits by similarity fused with library-name BM25.

    Corpus statistics come from the candidate pool only.  Descriptions are
    tokenized without the stoplist.
    """
    if not candidates:
        raise ValueError("fuse needs at least one candidate")
    query = library_query(library_names, cfg)
    corpus = Bm25Corpus([split_tokens(descriptions.get(c.cve_id, "")) for c in candidates],
                        cfg.bm25_k1, cfg.bm25_b)
    bm25 = [corpus.score(query, i) for i in range(len(candidates))]
    return combine([c.cve_id for c in candidates], [c.max_similarity for c in candidates], bm25, cfg)


def expand_by_cwe(ranked: Sequence[RankedCve], kb, cfg: FusionConfig = FusionConfig()) -> list[RankedCve]:
    """Append knowledge-base CVEs sharing a CWE with the top ``output_top_n`` entries.

    Each added CVE scores just below the best ranked entry carrying that CWE.
    Existing entries keep their scores and relative order.
    """
    seen = {r.cve_id for r in ranked}
    added: list[RankedCve] = []
    for entry in ranked[:cfg.output_top_n]:
        if entry.source != "retrieval":
            continue
        record = kb.get(entry.cve_id)
        if record is None:
            continue
        for cwe in record.cwe_ids:
            score = max(0.0, entry.final_score - EXPANSION_EPSILON)
            for sibling in kb.get_by_cwe(cwe):
                if sibling.cve_id in seen:
                    continue
                seen.add(sibling.cve_id)
                added.append(RankedCve(sibling.cve_id, 0.0, 0.0, 0.0, 0.0, score,
                                             source="cwe_expansion", via_cwe=cwe))
    if not added:
        return list(ranked)
    merged = list(ranked) + added
    # stable sort: retrieval entries keep their order among themselves
    merged.sort(key=lambda r: (-r.final_score, r.source != "retrieval", r.cve_id))
    return merged


def prompt_candidates(ranked: Sequence[RankedCve], cfg: FusionConfig = FusionConfig()) -> list[RankedCve]:
    """Top ``output_top_n`` retrieval entries; expansion entries only fill spare slots."""
    retrieval = [r for r in ranked if r.source == "retrieval"][:cfg.output_top_n]
    if len(retrieval) >= cfg.output_top_n:
        return retrieval
    spare = cfg.output_top_n - len(retrieval)
    extra = [r for r in ranked if r.source != "retrieval"][:spare]
    keep = {r.cve_id for r in retrieval + extra}
    return [r for r in ranked if r.cve_id in keep]
