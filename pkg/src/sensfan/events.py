"""Timestamped event logs for the dispatcher and the workers.

Timestamps are ``time.monotonic()`` in milliseconds. On Linux that clock is
shared by all processes on a host, so client and provider logs recorded on
one machine can be overlaid directly.
"""

from __future__ import annotations

import enum
import json
import os
import threading
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator


def now_ms() -> float:
    return time.monotonic() * 1000.0


class EventKind(str, enum.Enum):
    ENQUEUED = "ENQUEUED"
    SENT = "SENT"
    RETRY_SCHEDULED = "RETRY_SCHEDULED"
    COMPLETED = "COMPLETED"
    FAILED = "FAILED"


class WorkerEventKind(str, enum.Enum):
    RECEIVED = "RECEIVED"
    INSTANCE_COLD_STARTED = "INSTANCE_COLD_STARTED"
    STARTED = "STARTED"
    FINISHED = "FINISHED"
    THROTTLED = "THROTTLED"
    INJECTED_FAILURE = "INJECTED_FAILURE"


@dataclass(frozen=True)
class DispatchEvent:
    t: float
    run_id: int
    kind: EventKind
    detail: str | None = None

    def to_dict(self) -> dict:
        return {"t": self.t, "run_id": self.run_id, "kind": self.kind.value, "detail": self.detail}

    @classmethod
    def from_dict(cls, d: dict) -> DispatchEvent:
        return cls(float(d["t"]), int(d["run_id"]), EventKind(d["kind"]), d.get("detail"))


@dataclass(frozen=True)
class WorkerEvent:
    """``request`` numbers each HTTP request received by a server, so events
    of a retried run can be told apart."""

    t: float
    run_id: int | None
    kind: WorkerEventKind
    instance_id: int | None = None
    request: int | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> WorkerEvent:
        return cls(float(d["t"]), d.get("run_id"), WorkerEventKind(d["kind"]), d.get("instance_id"), d.get("request"))


class EventLog:
    """Thread-safe in-memory event list, optionally mirrored to an ndjson file."""

    def __init__(self, path: str | os.PathLike | None = None, *, append: bool = True):
        self.events: list = []
        self.path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a" if append else "w", encoding="utf-8")

    def emit(self, event) -> None:
        with self._lock:
            self.events.append(event)
            if self._fh is not None:
                self._fh.write(json.dumps(event.to_dict(), separators=(",", ":")) + "\n")
                self._fh.flush()

    def close(self) -> None:
        with self._lock:
            if self._fh is not None:
                self._fh.close()
                self._fh = None

    def __iter__(self) -> Iterator:
        return iter(list(self.events))

    def __len__(self) -> int:
        return len(self.events)


class MalformedLog(ValueError):
    pass


def _read(path, factory) -> list:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(factory(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise MalformedLog(f"{path}:{lineno}: {exc}") from None
    return out


def read_dispatch_events(path: str | os.PathLike) -> list[DispatchEvent]:
    return _read(path, DispatchEvent.from_dict)


def read_worker_events(path: str | os.PathLike) -> list[WorkerEvent]:
    return _read(path, WorkerEvent.from_dict)


def write_events(path: str | os.PathLike, events: Iterable) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in events:
            fh.write(json.dumps(e.to_dict(), separators=(",", ":")) + "\n")
