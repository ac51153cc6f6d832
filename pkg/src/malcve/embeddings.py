"""Text embedding providers.

Two providers share one surface: a remote HTTPS embedding endpoint for
production and a deterministic hashed bag-of-tokens projection used by tests
and offline runs.
"""
from __future__ import annotations

import hashlib
import logging
import os
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Protocol

import httpx
import numpy as np

from .errors import ConfigError, MalcveError
from .text import estimate_tokens, split_tokens

logger = logging.getLogger(__name__)

DEFAULT_DIM = 1536


class EmbeddingError(MalcveError):
    def __init__(self, message: str, index: int | None = None, diagnostics: str = ""):
        super().__init__(message)
        self.index = index
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class EmbeddingConfig:
    provider: str = "local-deterministic"
    model_id: str = "hashed-bow-v1"
    dim: int = DEFAULT_DIM
    request_batch_size: int = 64
    max_retries: int = 3

    def __post_init__(self):
        if self.provider not in ("remote", "local-deterministic"):
            raise ConfigError(f"unknown embedding provider {self.provider!r}")
        if self.dim <= 0 or self.request_batch_size <= 0 or self.max_retries < 0:
            raise ConfigError("embedding dim and batch size must be positive, retries non-negative")


class EmbeddingProvider(Protocol):
    config: EmbeddingConfig

    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]: ...


def _check_text(text: str, index: int | None = None) -> None:
    if not isinstance(text, str) or not text.strip():
        raise EmbeddingError("cannot embed empty text", index=index)


class LocalHashEmbedder:
    """Hashed bag-of-tokens projection, L2-normalized.

    Each token is hashed into one of ``dim`` buckets and counted.  Output is a
    pure function of ``(text, dim)``, and texts sharing more tokens land closer
    in cosine space, which keeps retrieval tests meaningful without a model.
    """

    def __init__(self, config: EmbeddingConfig | None = None):
        self.config = config or EmbeddingConfig()
        self.tokens_used = 0

    def _bucket(self, token: str) -> int:
        digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
        return int.from_bytes(digest, "little") % self.config.dim

    def embed_text(self, text: str) -> np.ndarray:
        _check_text(text)
        vec = np.zeros(self.config.dim, dtype=np.float64)
        for tok in split_tokens(text):
            vec[self._bucket(tok)] += 1.0
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # punctuation-only text: a fixed bucket keeps the vector unit-length
            vec[self._bucket(text.strip())] = 1.0
            norm = 1.0
        self.tokens_used += estimate_tokens(text)
        return (vec / norm).astype(np.float32)

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        for i, text in enumerate(texts):
            _check_text(text, index=i)
        return [self.embed_text(t) for t in texts]


class RemoteEmbedder:
    """Client for an OpenAI-style ``/embeddings`` endpoint.

    Requests carry ``{"model", "input"}``; the response must hold ``data``
    entries with ``index`` and ``embedding``.  Transport errors and 429/5xx
    responses are retried with exponential backoff.
    """

    def __init__(
        self,
        config: EmbeddingConfig,
        url: str | None = None,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
        backoff: float = 0.5,
        timeout: float = 60.0,
    ):
        self.config = config
        self.url = url or os.environ.get("MALCVE_EMBED_URL")
        if not self.url:
            raise ConfigError("remote embedder needs MALCVE_EMBED_URL")
        self.api_key = api_key if api_key is not None else os.environ.get("MALCVE_EMBED_API_KEY")
        self.client = client or httpx.Client(timeout=timeout)
        self.sleep = sleep
        self.backoff = backoff
        self.tokens_used = 0
        self.requests_made = 0

    def embed_text(self, text: str) -> np.ndarray:
        return self.embed_batch([text])[0]

    def embed_batch(self, texts: Sequence[str]) -> list[np.ndarray]:
        for i, text in enumerate(texts):
            _check_text(text, index=i)
        out: list[np.ndarray] = []
        size = self.config.request_batch_size
        for start in range(0, len(texts), size):
            out.extend(self._request(list(texts[start:start + size]), start))
        return out

    def _request(self, chunk: list[str], offset: int) -> list[np.ndarray]:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        payload = {"model": self.config.model_id, "input": chunk}
        last = ""
        for attempt in range(self.config.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            self.requests_made += 1
            try:
                resp = self.client.post(self.url, json=payload, headers=headers)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 429 or resp.status_code >= 500:
                last = f"HTTP {resp.status_code}: {resp.text[:200]}"
                continue
            if resp.status_code != 200:
                raise EmbeddingError("embedding request rejected", index=offset,
                                     diagnostics=f"HTTP {resp.status_code}: {resp.text[:200]}")
            return self._parse(resp.json(), chunk, offset)
        raise EmbeddingError(f"embedding endpoint failed after {self.config.max_retries + 1} attempts",
                             index=offset, diagnostics=last)

    def _parse(self, body: dict, chunk: list[str], offset: int) -> list[np.ndarray]:
        rows = sorted(body.get("data", []), key=lambda d: d.get("index", 0))
        if len(rows) != len(chunk):
            raise EmbeddingError("embedding count mismatch", index=offset,
                                 diagnostics=f"sent {len(chunk)}, got {len(rows)}")
        vecs = []
        for i, row in enumerate(rows):
            vec = np.asarray(row["embedding"], dtype=np.float32)
            if vec.shape != (self.config.dim,) or not np.all(np.isfinite(vec)):
                raise EmbeddingError("malformed embedding vector", index=offset + i,
                                     diagnostics=f"shape {vec.shape}")
            vecs.append(vec)
        usage = body.get("usage") or {}
        self.tokens_used += int(usage.get("total_tokens", sum(estimate_tokens(t) for t in chunk)))
        return vecs


def make_embedder(config: EmbeddingConfig, **kwargs) -> EmbeddingProvider:
    if config.provider == "remote":
        return RemoteEmbedder(config, **kwargs)
    return LocalHashEmbedder(config)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a64 = np.asarray(a, dtype=np.float64)
    b64 = np.asarray(b, dtype=np.float64)
    denom = np.linalg.norm(a64) * np.linalg.norm(b64)
    return float(a64 @ b64 / denom) if denom else 0.0
