"""Convergence metrics and trace-driven exports.

The headline metric is the evolutionary generality loss: synthesized tools
per thousand invocations, cumulative over the processed queries. It behaves
like a training loss for the tool library — high while the system must create
tools from scratch, decaying as reuse dominates. Alongside it live the tool
execution success rate and average output tokens per invocation.

Zero-denominator metrics are undefined (None), not zero: an early batch with
no invocations must not fake a converged score. Every exported number is
recomputed purely from the event trace, so replay equals the live run.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

from .trace import TraceEvent, read_trace

EXPORT_FORMAT_VERSION = "1"


@dataclass(frozen=True)
class QuerySample:
    """Per-query tallies: c tools created, u invocations, successes, output tokens."""

    query_id: str
    c: int
    u: int
    successes: int
    tool_tokens: int

    def __post_init__(self) -> None:
        if min(self.c, self.u, self.successes, self.tool_tokens) < 0:
            raise ValueError("sample fields must be nonnegative")
        if self.successes > self.u:
            raise ValueError("successes cannot exceed invocations")


def generality_loss(samples, window: int | None = None) -> float | None:
    """(Σ c_i / Σ u_i) × 1000 over the samples; None when no invocations occurred.

    `window` restricts the sums to the most recent samples; the default is
    the cumulative metric over the whole stream.
    """
    samples = list(samples)
    if window is not None:
        samples = samples[-window:]
    total_u = sum(s.u for s in samples)
    if total_u == 0:
        return None
    return (sum(s.c for s in samples) / total_u) * 1000.0


def success_rate(samples) -> float | None:
    """Σ successes / Σ u; None when no invocations occurred."""
    samples = list(samples)
    total_u = sum(s.u for s in samples)
    if total_u == 0:
        return None
    return sum(s.successes for s in samples) / total_u


def avg_tokens_per_invocation(samples) -> float | None:
    """Σ tool output tokens / Σ u; None when no invocations occurred."""
    samples = list(samples)
    total_u = sum(s.u for s in samples)
    if total_u == 0:
        return None
    return sum(s.tool_tokens for s in samples) / total_u


@dataclass
class MetricsAccumulator:
    """Live-run sample stream, appended in stable query order at each barrier."""

    samples: list[QuerySample] = field(default_factory=list)

    def add(self, sample: QuerySample) -> None:
        self.samples.append(sample)

    def extend(self, samples) -> None:
        self.samples.extend(samples)

    def summary(self) -> dict:
        return {
            "queries": len(self.samples),
            "tools_created": sum(s.c for s in self.samples),
            "invocations": sum(s.u for s in self.samples),
            "successes": sum(s.successes for s in self.samples),
            "tool_tokens": sum(s.tool_tokens for s in self.samples),
            "generality_loss": generality_loss(self.samples),
            "success_rate": success_rate(self.samples),
            "avg_tokens_per_invocation": avg_tokens_per_invocation(self.samples),
        }


# ---------------------------------------------------------------------------
# Replay: recompute everything from the event trace alone
# ---------------------------------------------------------------------------


@dataclass
class BatchRecord:
    index: int
    query_ids: list[str]
    library_size: int | None = None
    step: int | None = None


@dataclass
class ReplaySummary:
    samples: list[QuerySample]
    batches: list[BatchRecord]

    def summary(self) -> dict:
        return MetricsAccumulator(samples=list(self.samples)).summary()


def replay_events(events: list[TraceEvent]) -> ReplaySummary:
    """Rebuild per-query samples and batch records purely from raw events."""
    tallies: dict[str, dict[str, int]] = {}
    order: list[str] = []
    batches: list[BatchRecord] = []

    def tally(query_id: str) -> dict[str, int]:
        if query_id not in tallies:
            tallies[query_id] = {"c": 0, "u": 0, "successes": 0, "tool_tokens": 0}
        return tallies[query_id]

    for event in events:
        payload = event.payload
        if event.kind == "batch_boundary":
            batches.append(
                BatchRecord(index=payload["index"], query_ids=list(payload["query_ids"]))
            )
            order.extend(payload["query_ids"])
        elif event.kind == "invocation":
            t = tally(payload["query_id"])
            t["u"] += 1
            if payload["status"] == "ok":
                t["successes"] += 1
            t["tool_tokens"] += int(payload.get("output_tokens", 0))
        elif event.kind == "validation":
            if payload.get("context") == "develop" and payload.get("passed"):
                tally(payload["query_id"])["c"] += 1
        elif event.kind == "commit":
            if batches:
                batches[-1].library_size = payload.get("library_size")
                batches[-1].step = payload.get("step")

    samples = [QuerySample(query_id=q, **tallies.get(q, {"c": 0, "u": 0, "successes": 0, "tool_tokens": 0})) for q in order]
    return ReplaySummary(samples=samples, batches=batches)


def replay(trace_path: str | Path) -> ReplaySummary:
    """Verify a trace file and recompute its metrics."""
    return replay_events(read_trace(trace_path, verify=True))


# ---------------------------------------------------------------------------
# Plot-ready exports
# ---------------------------------------------------------------------------


def _format_metric(value: float | None) -> str:
    if value is None:
        return ""
    return f"{value:.6f}"


def export_curves(trace_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Write plot-ready CSV tables recomputed from the trace.

    library_size.csv      — (cumulative_queries, library_size) per commit
    generality_loss.csv   — (cumulative_queries, generality_loss) running per query
    batch_stats.csv       — (batch_index, success_rate, avg_tokens_per_invocation)
    """
    summary = replay(trace_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    version_row = [f"# format={EXPORT_FORMAT_VERSION}"]

    path = out / "library_size.csv"
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(version_row)
        writer.writerow(["cumulative_queries", "library_size"])
        cumulative = 0
        for batch in summary.batches:
            cumulative += len(batch.query_ids)
            if batch.library_size is not None:
                writer.writerow([cumulative, batch.library_size])
    written.append(path)

    path = out / "generality_loss.csv"
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(version_row)
        writer.writerow(["cumulative_queries", "generality_loss"])
        for i in range(1, len(summary.samples) + 1):
            writer.writerow([i, _format_metric(generality_loss(summary.samples[:i]))])
    written.append(path)

    path = out / "batch_stats.csv"
    with path.open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(version_row)
        writer.writerow(["batch_index", "success_rate", "avg_tokens_per_invocation"])
        by_id = {s.query_id: s for s in summary.samples}
        for batch in summary.batches:
            batch_samples = [by_id[q] for q in batch.query_ids if q in by_id]
            writer.writerow(
                [
                    batch.index,
                    _format_metric(success_rate(batch_samples)),
                    _format_metric(avg_tokens_per_invocation(batch_samples)),
                ]
            )
    written.append(path)
    return written
