"""NVD CVE API 2.0 parsing and a paged, retrying client."""
from __future__ import annotations

import logging
import os
import re
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone

import httpx

from .errors import MalcveError

logger = logging.getLogger(__name__)

NVD_API_URL = "https://services.nvd.nist.gov/rest/json/cves/2.0"
CVE_ID_RE = re.compile(r"^CVE-\d{4}-\d{4,}$")
CWE_ID_RE = re.compile(r"^CWE-\d+$")

# v3.1 first, then the highest remaining version
_CVSS_ORDER = ("cvssMetricV31", "cvssMetricV40", "cvssMetricV30", "cvssMetricV2")
# NVD caps lastMod ranges at 120 days
_MAX_WINDOW = timedelta(days=120)


class FeedParseError(MalcveError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(f"entry {index}: {message}" if index is not None else message)
        self.index = index


class NvdFetchError(MalcveError):
    pass


@dataclass
class NvdEntry:
    cve_id: str
    description: str
    cwe_ids: list[str] = field(default_factory=list)
    cvss_vector: str = ""
    cvss_score: float | None = None
    status: str = ""
    last_modified: str = ""

    @property
    def rejected(self) -> bool:
        return self.status.lower() == "rejected" or self.description.startswith("** REJECT **")


def _english(descriptions: list[dict]) -> str:
    for d in descriptions:
        if str(d.get("lang", "")).lower().startswith("en") and d.get("value", "").strip():
            return d["value"].strip()
    return ""


def _cwes(weaknesses: list[dict]) -> list[str]:
    found: list[str] = []
    for w in weaknesses:
        for d in w.get("description", []):
            value = str(d.get("value", "")).strip()
            if CWE_ID_RE.match(value) and value not in found:
                found.append(value)
    return found


def _cvss(metrics: dict) -> tuple[str, float | None]:
    for key in _CVSS_ORDER:
        entries = metrics.get(key) or []
        if not entries:
            continue
        primary = [e for e in entries if e.get("type") == "Primary"]
        data = (primary or entries)[0].get("cvssData", {})
        score = data.get("baseScore")
        if score is not None:
            score = float(score)
            if not 0.0 <= score <= 10.0:
                score = None
        return str(data.get("vectorString", "")), score
    return "", None


def parse_entry(item: dict, index: int) -> NvdEntry:
    if not isinstance(item, dict):
        raise FeedParseError("vulnerability entry is not an object", index)
    cve = item.get("cve")
    if not isinstance(cve, dict):
        raise FeedParseError("missing 'cve' object", index)
    cve_id = cve.get("id")
    if not isinstance(cve_id, str) or not CVE_ID_RE.match(cve_id):
        raise FeedParseError(f"bad CVE id {cve_id!r}", index)
    try:
        description = _english(cve.get("descriptions") or [])
        cwe_ids = _cwes(cve.get("weaknesses") or [])
        vector, score = _cvss(cve.get("metrics") or {})
    except (AttributeError, TypeError, ValueError) as exc:
        raise FeedParseError(f"malformed field in {cve_id}: {exc}", index) from exc
    return NvdEntry(
        cve_id=cve_id,
        description=description,
        cwe_ids=cwe_ids,
        cvss_vector=vector,
        cvss_score=score,
        status=str(cve.get("vulnStatus", "")),
        last_modified=str(cve.get("lastModified", "")),
    )


def parse_feed(document: dict) -> list[NvdEntry]:
    """Parse an NVD 2.0 document (``{"vulnerabilities": [...]}``)."""
    if not isinstance(document, dict) or not isinstance(document.get("vulnerabilities"), list):
        raise FeedParseError("document has no 'vulnerabilities' array")
    return [parse_entry(item, i) for i, item in enumerate(document["vulnerabilities"])]


def _iso(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.000Z")


class NvdClient:
    """Fetches CVEs modified within a time range, following NVD paging."""

    def __init__(
        self,
        base_url: str = NVD_API_URL,
        api_key: str | None = None,
        client: httpx.Client | None = None,
        max_retries: int = 2,
        backoff: float = 6.0,
        page_size: int = 2000,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.base_url = base_url
        self.api_key = api_key if api_key is not None else os.environ.get("MALCVE_NVD_API_KEY")
        self.client = client or httpx.Client(timeout=60.0)
        self.max_retries = max_retries
        self.backoff = backoff
        self.page_size = page_size
        self.sleep = sleep

    def _get(self, params: dict) -> dict:
        headers = {"apiKey": self.api_key} if self.api_key else {}
        last = ""
        for attempt in range(self.max_retries + 1):
            if attempt:
                self.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                resp = self.client.get(self.base_url, params=params, headers=headers)
            except httpx.HTTPError as exc:
                last = f"transport error: {exc}"
                continue
            if resp.status_code == 200:
                return resp.json()
            last = f"HTTP {resp.status_code}"
            if resp.status_code not in (403, 429) and resp.status_code < 500:
                break
        raise NvdFetchError(f"NVD request failed after {attempt + 1} attempt(s): {last}")

    def fetch_modified(self, since: datetime, until: datetime) -> dict:
        """Return one merged NVD document for entries modified in ``[since, until]``."""
        vulns: list[dict] = []
        start = since
        while start < until:
            end = min(start + _MAX_WINDOW, until)
            index = 0
            while True:
                page = self._get({
                    "lastModStartDate": _iso(start),
                    "lastModEndDate": _iso(end),
                    "startIndex": index,
                    "resultsPerPage": self.page_size,
                })
                batch = page.get("vulnerabilities", [])
                vulns.extend(batch)
                index += len(batch)
                if not batch or index >= int(page.get("totalResults", 0)):
                    break
            start = end
        return {"format": "NVD_CVE", "version": "2.0", "vulnerabilities": vulns}
