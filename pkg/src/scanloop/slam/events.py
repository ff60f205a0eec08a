"""JSON-lines log of SLAM events."""

import threading
from collections import Counter
from pathlib import Path
from typing import Any

from scanloop.common.jsonl import append_jsonl

EVENT_KINDS = (
    "keyframe",
    "degeneracy",
    "tracking_lost",
    "relocalization",
    "relocalization_failed",
    "loop",
    "loop_rejected",
    "optimization",
)


class EventLog:
    """In-memory event list, mirrored to a JSONL file when ``path`` is set."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self.events: list[dict[str, Any]] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("", encoding="utf-8")

    def emit(self, kind: str, **fields: Any) -> dict[str, Any]:
        if kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {kind!r}")
        with self._lock:
            record = {"seq": len(self.events), "event": kind, **fields}
            self.events.append(record)
            if self.path is not None:
                append_jsonl(self.path, record)
        return record

    def of_kind(self, kind: str) -> list[dict[str, Any]]:
        with self._lock:
            return [e for e in self.events if e["event"] == kind]

    def counts(self) -> dict[str, int]:
        with self._lock:
            return dict(Counter(e["event"] for e in self.events))
