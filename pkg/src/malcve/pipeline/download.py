"""Rate-limited retrieval of samples by hash from a sample repository."""
from __future__ import annotations

import hashlib
import os
import threading
import time
from collections import deque
from collections.abc import Callable
from dataclasses import dataclass
from pathlib import Path

import httpx

from ..errors import ConfigError, MalcveError


class DownloadError(MalcveError):
    pass


class RequestRateLimiter:
    """At most ``ceiling`` requests in any ``interval``-second window."""

    def __init__(self, ceiling: int, interval: float = 1.0,
                 clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if ceiling <= 0 or interval <= 0:
            raise ConfigError("rate limit ceiling and interval must be positive")
        self.ceiling = ceiling
        self.interval = interval
        self.clock = clock
        self.sleep = sleep
        self._stamps: deque[float] = deque()
        self._lock = threading.Lock()

    def wait(self) -> float:
        while True:
            with self._lock:
                now = self.clock()
                while self._stamps and self._stamps[0] <= now - self.interval:
                    self._stamps.popleft()
                if len(self._stamps) < self.ceiling:
                    self._stamps.append(now)
                    return now
                delay = self._stamps[0] + self.interval - now
            self.sleep(max(delay, 1e-6))


@dataclass
class FetchResult:
    sha256: str
    path: Path | None
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.path is not None


class SampleFetcher:
    """GETs ``url_template.format(sha256=...)`` and checks the payload hash.

    The credential is sent in ``auth_header``; its value comes from the
    environment variable named by ``auth_env`` unless given directly.
    """

    def __init__(self, url_template: str, dest_dir: Path | str, limiter: RequestRateLimiter,
                 auth_header: str = "Authorization", auth_value: str | None = None,
                 auth_env: str = "MALCVE_FETCH_API_KEY", client: httpx.Client | None = None,
                 max_retries: int = 2):
        if "{sha256}" not in url_template:
            raise ConfigError("download url_template must contain {sha256}")
        self.url_template = url_template
        self.dest_dir = Path(dest_dir)
        self.limiter = limiter
        self.auth_header = auth_header
        self.auth_value = auth_value if auth_value is not None else os.environ.get(auth_env)
        self.client = client or httpx.Client(timeout=120.0, follow_redirects=True)
        self.max_retries = max_retries

    def fetch(self, sha256: str) -> FetchResult:
        sha256 = sha256.lower()
        headers = {self.auth_header: self.auth_value} if self.auth_value else {}
        url = self.url_template.format(sha256=sha256)
        last = ""
        for _ in range(self.max_retries + 1):
            self.limiter.wait()
            try:
                resp = self.client.get(url, headers=headers)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code != 200:
                last = f"HTTP {resp.status_code}"
                if resp.status_code == 429 or resp.status_code >= 500:
                    continue
                return FetchResult(sha256, None, last)
            payload = resp.content
            actual = hashlib.sha256(payload).hexdigest()
            if actual != sha256:
                return FetchResult(sha256, None, f"sha256 mismatch: payload hashes to {actual}")
            self.dest_dir.mkdir(parents=True, exist_ok=True)
            target = self.dest_dir / f"{sha256}.jar"
            tmp = target.with_suffix(".part")
            tmp.write_bytes(payload)
            os.replace(tmp, target)
            return FetchResult(sha256, target)
        return FetchResult(sha256, None, f"gave up after {self.max_retries + 1} attempts: {last}")
