"""Observability artifacts rebuilt from event logs and run records."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .campaign import RunRecord, RunState
from .events import DispatchEvent, EventKind, WorkerEvent, WorkerEventKind


class NoData(ValueError):
    pass


CLIENT_STATES = ("queued", "submitted", "completed", "failed")
PROVIDER_STATES = ("active", "completed")

_CLIENT_STATE_OF = {
    EventKind.ENQUEUED: "queued",
    EventKind.SENT: "submitted",
    EventKind.RETRY_SCHEDULED: "queued",
    EventKind.COMPLETED: "completed",
    EventKind.FAILED: "failed",
}


@dataclass
class Timeline:
    """Per-state counts sampled every ``tick_ms``; ``t_ms`` is relative to ``origin``.

    ``peaks`` holds the exact maxima over the whole event stream, which tick
    sampling alone could miss.
    """

    t_ms: np.ndarray
    series: dict[str, np.ndarray]
    peaks: dict[str, int]
    origin: float
    tick_ms: float
    n: int = 0

    @property
    def peak_submitted(self) -> int:
        return self.peaks.get("submitted", 0)

    @property
    def peak_active(self) -> int:
        return self.peaks.get("active", 0)

    def rows(self) -> list[list]:
        names = list(self.series)
        return [[float(t)] + [int(self.series[k][i]) for k in names] for i, t in enumerate(self.t_ms)]


def _sample_ticks(times: Sequence[float], snapshots: list[dict], t0: float, tick_ms: float, initial: dict) -> tuple:
    """Snapshot state after all events with ``t <= t0 + k * tick_ms``."""
    end = times[-1] if times else t0
    nticks = int(math.floor((end - t0) / tick_ms)) + 1
    if times and t0 + (nticks - 1) * tick_ms < end:
        nticks += 1
    grid = t0 + tick_ms * np.arange(nticks)
    pos = np.searchsorted(np.asarray(times), grid, side="right")
    series = {k: np.empty(nticks, dtype=np.int64) for k in initial}
    for i, p in enumerate(pos):
        snap = snapshots[p - 1] if p > 0 else initial
        for k in series:
            series[k][i] = snap[k]
    return grid - t0, series


def build_timeline(events: Iterable, tick_ms: float = 100.0, origin: float | None = None) -> Timeline:
    """Client timeline from dispatch events, or provider timeline from worker events.

    Every run seen in a client log counts as queued from the start, so the
    four client counts always sum to the number of runs.
    """
    if tick_ms <= 0:
        raise ValueError("tick_ms must be positive")
    events = sorted(events, key=lambda e: e.t)  # stable: log order breaks ties
    if events and isinstance(events[0], WorkerEvent):
        return _provider_timeline(events, tick_ms, origin)
    for e in events:
        if not isinstance(e, DispatchEvent):
            raise TypeError(f"unexpected event {e!r}")
    run_ids = {e.run_id for e in events}
    counts = {k: 0 for k in CLIENT_STATES}
    counts["queued"] = len(run_ids)
    initial = dict(counts)
    state = {rid: "queued" for rid in run_ids}
    peaks = dict(counts)
    snaps, times = [], []
    for e in events:
        new = _CLIENT_STATE_OF[e.kind]
        old = state[e.run_id]
        if new != old:
            counts[old] -= 1
            counts[new] += 1
            state[e.run_id] = new
            peaks[new] = max(peaks[new], counts[new])
        snaps.append(dict(counts))
        times.append(e.t)
    t0 = origin if origin is not None else (times[0] if times else 0.0)
    t_ms, series = _sample_ticks(times, snaps, t0, tick_ms, initial)
    return Timeline(t_ms, series, peaks, t0, tick_ms, len(run_ids))


def _provider_timeline(events: list[WorkerEvent], tick_ms: float, origin: float | None) -> Timeline:
    counts = {k: 0 for k in PROVIDER_STATES}
    initial = dict(counts)
    peaks = dict(counts)
    snaps, times = [], []
    for e in events:
        if e.kind is WorkerEventKind.STARTED:
            counts["active"] += 1
        elif e.kind is WorkerEventKind.FINISHED:
            counts["active"] -= 1
            counts["completed"] += 1
        peaks["active"] = max(peaks["active"], counts["active"])
        peaks["completed"] = counts["completed"]
        snaps.append(dict(counts))
        times.append(e.t)
    t0 = origin if origin is not None else (times[0] if times else 0.0)
    t_ms, series = _sample_ticks(times, snaps, t0, tick_ms, initial)
    n = len({e.request for e in events if e.kind is WorkerEventKind.STARTED})
    return Timeline(t_ms, series, peaks, t0, tick_ms, n)


def max_in_flight(events: Iterable[DispatchEvent]) -> int:
    """Exact peak of ``SENT`` minus terminal-or-retry events, in log order."""
    cur = peak = 0
    for e in sorted(events, key=lambda e: e.t):
        if e.kind is EventKind.SENT:
            cur += 1
            peak = max(peak, cur)
        elif e.kind in (EventKind.COMPLETED, EventKind.FAILED, EventKind.RETRY_SCHEDULED):
            cur -= 1
    return peak


def max_concurrent_executions(events: Iterable[WorkerEvent]) -> int:
    cur = peak = 0
    for e in sorted(events, key=lambda e: e.t):
        if e.kind is WorkerEventKind.STARTED:
            cur += 1
            peak = max(peak, cur)
        elif e.kind is WorkerEventKind.FINISHED:
            cur -= 1
    return peak


# --------------------------------------------------------------------------
# Overheads
# --------------------------------------------------------------------------


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Nearest-rank percentile ``q`` (0 < q <= 100) of an ascending array."""
    n = len(sorted_values)
    if n == 0:
        raise NoData("no values")
    rank = max(1, math.ceil(q / 100.0 * n))
    return float(sorted_values[rank - 1])


@dataclass
class OverheadStats:
    run_ids: np.ndarray
    sim_time_ms: np.ndarray
    wall_time_ms: np.ndarray
    overhead_ms: np.ndarray
    quantiles: dict[str, float]
    mean: float
    hist_counts: np.ndarray
    hist_edges: np.ndarray

    def fraction_below(self, threshold_ms: float) -> float:
        return float(np.mean(self.overhead_ms < threshold_ms))


def overhead_stats(records: Iterable[RunRecord], bins: int = 20) -> OverheadStats:
    done = sorted((r for r in records if r.state is RunState.COMPLETED), key=lambda r: r.run_id)
    if not done:
        raise NoData("no completed records")
    ids = np.array([r.run_id for r in done])
    sim = np.array([r.sim_time_ms for r in done], dtype=float)
    wall = np.array([r.wall_time_ms for r in done], dtype=float)
    ov = wall - sim
    if np.any(ov < 0):
        raise ValueError("negative overhead: wall time below simulation time")
    s = np.sort(ov)
    q = {name: nearest_rank(s, p) for name, p in (("p50", 50), ("p90", 90), ("p99", 99))}
    q["max"] = float(s[-1])
    counts, edges = np.histogram(ov, bins=bins)
    return OverheadStats(ids, sim, wall, ov, q, float(ov.mean()), counts, edges)


# --------------------------------------------------------------------------
# Runtime table
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class RuntimeRow:
    run_id: int
    request: int | None
    instance_id: int | None
    received_t: float
    start_t: float
    end_t: float


def runtime_table(events: Iterable) -> list[RuntimeRow]:
    """Per-execution (received, start, end) times sorted by receipt time.

    Worker events give one row per executed request; throttled or failed
    admissions never started and are left out. Dispatch events give one row
    per completed run (send time as receipt and start).
    """
    events = sorted(events, key=lambda e: e.t)
    rows: list[RuntimeRow] = []
    if events and isinstance(events[0], WorkerEvent):
        by_req: dict = {}
        for e in events:
            by_req.setdefault(e.request, {}).setdefault(e.kind, e)
        for req, kinds in by_req.items():
            if WorkerEventKind.STARTED not in kinds or WorkerEventKind.FINISHED not in kinds:
                continue
            start = kinds[WorkerEventKind.STARTED]
            recv = kinds.get(WorkerEventKind.RECEIVED, start)
            rows.append(RuntimeRow(start.run_id, req, start.instance_id, recv.t, start.t, kinds[WorkerEventKind.FINISHED].t))
    else:
        last_sent: dict[int, float] = {}
        for e in events:
            if e.kind is EventKind.SENT:
                last_sent[e.run_id] = e.t
            elif e.kind is EventKind.COMPLETED and e.run_id in last_sent:
                t = last_sent[e.run_id]
                rows.append(RuntimeRow(e.run_id, None, None, t, t, e.t))
    rows.sort(key=lambda r: (r.received_t, r.start_t))
    return rows


# --------------------------------------------------------------------------
# Speedup
# --------------------------------------------------------------------------


def speedup(records: Iterable[RunRecord], wall_time_ms: float) -> float:
    """Sum of simulation times over the campaign wall time."""
    if not wall_time_ms > 0:
        raise ValueError("wall time must be positive")
    total = math.fsum(r.sim_time_ms for r in records if r.state is RunState.COMPLETED)
    return total / wall_time_ms


# --------------------------------------------------------------------------
# Report bundle
# --------------------------------------------------------------------------


def _write_csv(path: Path, header: list[str], rows: Iterable[Sequence]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


@dataclass
class ReportBundle:
    directory: Path
    files: list[Path] = field(default_factory=list)


def render_report(
    out_dir: str | os.PathLike,
    client: Timeline | None = None,
    provider: Timeline | None = None,
    overhead: OverheadStats | None = None,
    runtime: list[RuntimeRow] | None = None,
    summary: dict | None = None,
) -> ReportBundle:
    """Write CSV tables, ``summary.json`` and an SVG overview into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    bundle = ReportBundle(out)

    def add(name):
        p = out / name
        bundle.files.append(p)
        return p

    if client is not None:
        _write_csv(add("timeline_client.csv"), ["t_ms", *client.series], client.rows())
    if provider is not None:
        _write_csv(add("timeline_provider.csv"), ["t_ms", *provider.series], provider.rows())
    if overhead is not None:
        _write_csv(
            add("overhead.csv"),
            ["run_id", "sim_time_ms", "wall_time_ms", "overhead_ms"],
            zip(overhead.run_ids.tolist(), overhead.sim_time_ms, overhead.wall_time_ms, overhead.overhead_ms),
        )
    if runtime is not None:
        base = min((r.received_t for r in runtime), default=0.0)
        _write_csv(
            add("runtime.csv"),
            ["run_id", "request", "instance_id", "received_t_ms", "start_t_ms", "end_t_ms"],
            ([r.run_id, r.request, r.instance_id, r.received_t - base, r.start_t - base, r.end_t - base] for r in runtime),
        )
    doc = dict(summary or {})
    if overhead is not None:
        doc["overhead_quantiles_ms"] = overhead.quantiles
        doc["overhead_mean_ms"] = overhead.mean
    if client is not None:
        doc["peak_submitted"] = client.peak_submitted
    if provider is not None:
        doc["peak_active"] = provider.peak_active
    with open(add("summary.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _render_svg(add("report.svg"), client, provider, overhead, runtime)
    return bundle


def _render_svg(path, client, provider, overhead, runtime) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    panels = [p for p in (client, provider, overhead, runtime) if p is not None]
    fig, axes = plt.subplots(max(len(panels), 1), 1, figsize=(7, 2.6 * max(len(panels), 1)), squeeze=False)
    axes = list(axes[:, 0])
    if not panels:
        axes[0].text(0.5, 0.5, "no data", ha="center", va="center")
        axes[0].set_axis_off()
    if client is not None:
        ax = axes.pop(0)
        for k, v in client.series.items():
            ax.plot(client.t_ms / 1000, v, label=k)
        ax.set(title="client-side states", xlabel="time [s]", ylabel="runs")
        ax.legend(fontsize="small")
    if provider is not None:
        ax = axes.pop(0)
        for k, v in provider.series.items():
            ax.plot(provider.t_ms / 1000, v, label=k)
        ax.set(title="provider-side states", xlabel="time [s]", ylabel="executions")
        ax.legend(fontsize="small")
    if overhead is not None:
        ax = axes.pop(0)
        ax.hist([overhead.overhead_ms, overhead.sim_time_ms], bins=overhead.hist_edges.size - 1, label=["overhead", "simulation"])
        ax.set(title="overhead and simulation time", xlabel="ms", ylabel="runs")
        ax.legend(fontsize="small")
    if runtime is not None:
        ax = axes.pop(0)
        if runtime:
            base = runtime[0].received_t
            y = np.arange(len(runtime))
            ax.hlines(y, [(r.received_t - base) / 1000 for r in runtime], [(r.start_t - base) / 1000 for r in runtime], color="tab:orange", lw=1)
            ax.hlines(y, [(r.start_t - base) / 1000 for r in runtime], [(r.end_t - base) / 1000 for r in runtime], color="tab:blue", lw=1)
        ax.set(title="runtimes (sorted by receipt)", xlabel="time [s]", ylabel="execution")
    fig.tight_layout()
    # fixed id salt and no date keep the SVG byte-stable across runs
    with plt.rc_context({"svg.hashsalt": "sensfan"}):
        fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
