"""Work items, their state machine, and the resumable JSONL journal."""
from __future__ import annotations

import json
import threading
from dataclasses import asdict, dataclass
from pathlib import Path

from ..errors import MalcveError

STATES = ("queued_download", "downloaded", "queued_analysis", "analyzing", "done", "failed", "excluded")
TERMINAL = frozenset({"done", "failed", "excluded"})
INITIAL = frozenset({"queued_download", "queued_analysis"})

TRANSITIONS = {
    "queued_download": {"downloaded", "failed"},
    "downloaded": {"queued_analysis", "failed"},
    "queued_analysis": {"analyzing"},
    "analyzing": {"done", "failed", "excluded"},
}


class TransitionError(MalcveError):
    pass


@dataclass
class WorkItem:
    sha256: str
    state: str = "queued_download"
    attempts: int = 0
    source: str = ""      # local path, or empty for items fetched by hash
    detail: str = ""

    def __post_init__(self):
        if self.state not in STATES:
            raise ValueError(f"unknown work item state {self.state!r}")

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL

    def advance(self, new_state: str, detail: str = "") -> WorkItem:
        if new_state not in TRANSITIONS.get(self.state, ()):
            raise TransitionError(f"{self.sha256[:12]}: cannot go from {self.state} to {new_state}")
        self.state = new_state
        if new_state == "analyzing":
            self.attempts += 1
        self.detail = detail
        return self


class Journal:
    """Append-only JSONL log of item states; the last line per item wins.

    Reopening a journal after an interruption yields each item's latest state,
    so a batch can skip finished work and re-queue the rest.
    """

    def __init__(self, path: Path | str | None):
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def replay(self) -> dict[str, WorkItem]:
        items: dict[str, WorkItem] = {}
        if self.path is None or not self.path.is_file():
            return items
        for line in self.path.read_text("utf-8").splitlines():
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError:
                # a torn final line from a crash
                continue
            items[data["sha256"]] = WorkItem(**data)
        return items

    def record(self, item: WorkItem) -> None:
        if self.path is None:
            return
        line = json.dumps(asdict(item), ensure_ascii=False) + "\n"
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(line)
            fh.flush()
