from __future__ import annotations

import os
from collections.abc import Callable
from datetime import datetime, timezone

Clock = Callable[[], datetime]


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def fixed_clock(ts: datetime | str) -> Clock:
    moment = parse_ts(ts) if isinstance(ts, str) else ts
    return lambda: moment


def clock_from_env() -> Clock:
    """Honour ``MALCVE_FIXED_TIME`` so CLI output can be made byte-stable."""
    fixed = os.environ.get("MALCVE_FIXED_TIME")
    return fixed_clock(fixed) if fixed else utcnow


def parse_ts(text: str) -> datetime:
    ts = datetime.fromisoformat(text.strip().replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def format_ts(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
