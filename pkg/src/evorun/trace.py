"""Append-only event trace with a per-line digest chain.

Every state transition, LLM call, and tool invocation is recorded as one
newline-delimited JSON event. Sequence numbers are assigned by a single
serialized appender; workers buffer their events locally and the engine
flushes them at the batch barrier in stable query order, so two identical
scripted runs produce byte-identical trace files. Timestamps come from a
clock abstraction: scripted runs use a logical clock, live runs wall time.
"""

from __future__ import annotations

import hashlib
import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

TRACE_FORMAT_VERSION = "1"

EVENT_KINDS = (
    "header",
    "phase",
    "llm_exchange",
    "invocation",
    "validation",
    "batch_boundary",
    "absorb",
    "commit",
)


class TraceError(Exception):
    """Base class for trace failures."""


class TraceCorruptionError(TraceError):
    """A sequence gap, digest mismatch, or unreadable line in a trace file."""

    def __init__(self, message: str, seq: int | None = None):
        super().__init__(message)
        self.seq = seq


@dataclass(frozen=True)
class TraceEvent:
    seq: int
    ts: float
    kind: str
    payload: dict
    digest: str


class LogicalClock:
    """Deterministic monotone clock: 0, 1, 2, …"""

    def __init__(self) -> None:
        self._next = 0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            value = self._next
            self._next += 1
            return float(value)


class WallClock:
    def now(self) -> float:
        return time.time()


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def _chain_digest(prev_digest: str, seq: int, ts: float, kind: str, payload: dict) -> str:
    body = _canonical({"seq": seq, "ts": ts, "kind": kind, "payload": payload})
    return hashlib.sha256((prev_digest + body).encode("utf-8")).hexdigest()


class TraceWriter:
    """Single serialized appender; the only component that assigns sequence numbers."""

    def __init__(self, path: str | Path, clock=None, config_echo: dict | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._clock = clock or LogicalClock()
        self._lock = threading.Lock()
        self._seq = 0
        self._prev_digest = ""
        self._file = self.path.open("w", encoding="utf-8")
        self.append(
            "header",
            {"format": TRACE_FORMAT_VERSION, "config": config_echo or {}},
        )

    def append(self, kind: str, payload: dict) -> TraceEvent:
        if kind not in EVENT_KINDS:
            raise TraceError(f"unknown event kind: {kind!r}")
        with self._lock:
            seq = self._seq
            ts = self._clock.now()
            digest = _chain_digest(self._prev_digest, seq, ts, kind, payload)
            event = TraceEvent(seq=seq, ts=ts, kind=kind, payload=payload, digest=digest)
            line = _canonical(
                {"seq": seq, "ts": ts, "kind": kind, "payload": payload, "digest": digest}
            )
            self._file.write(line + "\n")
            self._file.flush()
            self._seq += 1
            self._prev_digest = digest
            return event

    def extend(self, events) -> None:
        for kind, payload in events:
            self.append(kind, payload)

    def close(self) -> None:
        self._file.close()

    def __enter__(self) -> "TraceWriter":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_trace(path: str | Path, verify: bool = True) -> list[TraceEvent]:
    """Load a trace file, verifying sequence continuity and the digest chain."""
    events: list[TraceEvent] = []
    prev_digest = ""
    expected_seq = 0
    with Path(path).open("r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceCorruptionError(
                    f"unreadable trace line {line_no}: {exc}", seq=expected_seq
                ) from exc
            try:
                event = TraceEvent(
                    seq=raw["seq"],
                    ts=raw["ts"],
                    kind=raw["kind"],
                    payload=raw["payload"],
                    digest=raw["digest"],
                )
            except KeyError as exc:
                raise TraceCorruptionError(
                    f"trace line {line_no} lacks field {exc}", seq=expected_seq
                ) from exc
            if verify:
                if event.seq != expected_seq:
                    raise TraceCorruptionError(
                        f"sequence gap: expected {expected_seq}, found {event.seq}", seq=event.seq
                    )
                recomputed = _chain_digest(prev_digest, event.seq, event.ts, event.kind, event.payload)
                if recomputed != event.digest:
                    raise TraceCorruptionError(f"digest mismatch at seq {event.seq}", seq=event.seq)
            events.append(event)
            prev_digest = event.digest
            expected_seq = event.seq + 1
    return events
