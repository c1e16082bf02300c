"""Cold starts, instance caps and the overhead distribution.

Two waves hit a cold pool with a 2 s start-up cost: the first wave pays it, the
second reuses warm instances. A second campaign oversubscribes a capped pool to
show 429 throttling being absorbed by the retry queue.

    python demos/03_cold_starts_and_throttling.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from sensfan.campaign import Campaign, ParameterSpec, Sample, Uniform
from sensfan.events import WorkerEventKind, read_worker_events
from sensfan.executor import Backoff, ExecutorConfig, run
from sensfan.metrics import build_timeline, max_concurrent_executions, overhead_stats, render_report, runtime_table
from sensfan.models import BuiltInModel
from sensfan.worker import MockCloudConfig, mock_cloud_serve


def campaign(root: Path, name: str, n: int) -> Campaign:
    camp = Campaign.create(name, [ParameterSpec("x", Uniform(0, 1))], root / name)
    camp.add_samples([Sample(i, {"x": i / n}) for i in range(n)])
    return camp


def main() -> None:
    root = Path(tempfile.mkdtemp())
    model = BuiltInModel("sleep", {"duration_ms": 150})

    camp = campaign(root, "cold", 64)
    samples = camp.samples()
    with mock_cloud_serve(model, MockCloudConfig(max_instances=32, cold_start_ms=2000)) as srv:
        for wave in (samples[:32], samples[32:]):
            run(wave, ExecutorConfig(srv.url, max_load=32), camp)
    stats = overhead_stats(camp.load_results(), bins=10)
    camp.close()
    ov = stats.overhead_ms
    print(f"wave 1 median overhead {sorted(ov[:32])[15]:.0f} ms, wave 2 median {sorted(ov[32:])[15]:.0f} ms")
    print("histogram (ms):")
    for lo, hi, c in zip(stats.hist_edges[:-1], stats.hist_edges[1:], stats.hist_counts):
        print(f"  {lo:7.0f} - {hi:7.0f}  {'#' * int(c)}")

    camp = campaign(root, "throttle", 500)
    log = root / "worker.ndjson"
    backoff = Backoff(initial_ms=50, multiplier=2, max_ms=1000, jitter=0.5)
    with mock_cloud_serve(model, MockCloudConfig(max_instances=32), event_log=log) as srv:
        summary = run(None, ExecutorConfig(srv.url, max_load=256, max_retries=50, backoff=backoff), camp)
    camp.close()
    wev = read_worker_events(log)
    throttled = sum(e.kind is WorkerEventKind.THROTTLED for e in wev)
    print(f"\n500 runs, 256 in flight, 32 instances: {summary.completed} completed, {throttled} requests throttled")
    print(f"peak concurrent executions {max_concurrent_executions(wev)}, speedup {summary.speedup:.1f}x")
    bundle = render_report(root / "report", build_timeline(summary.events), build_timeline(wev), runtime=runtime_table(wev))
    print(f"report: {[p.name for p in bundle.files]} in {root / 'report'}")


if __name__ == "__main__":
    main()
