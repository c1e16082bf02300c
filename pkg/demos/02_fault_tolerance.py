"""Transient failures and retries against the mock cloud.

One run in twenty fails with a 5xx. With retries enabled every run still
completes; with retries disabled roughly 5% of the campaign ends FAILED.

    python demos/02_fault_tolerance.py
"""

from __future__ import annotations

import tempfile
from pathlib import Path

from sensfan.campaign import Campaign, ParameterSpec, RunState, Sample, Uniform
from sensfan.events import EventKind
from sensfan.executor import ExecutorConfig, run
from sensfan.models import BuiltInModel
from sensfan.worker import MockCloudConfig, mock_cloud_serve

N = 1000


def campaign(root: Path, name: str) -> Campaign:
    camp = Campaign.create(name, [ParameterSpec("x", Uniform(0, 1))], root / name)
    camp.add_samples([Sample(i, {"x": i / N}) for i in range(N)])
    return camp


def main() -> None:
    root = Path(tempfile.mkdtemp())
    model = BuiltInModel("sleep", {"duration_ms": 20})
    for retries in (5, 0):
        camp = campaign(root, f"retries{retries}")
        with mock_cloud_serve(model, MockCloudConfig(failure_rate=0.05, seed=retries)) as srv:
            summary = run(None, ExecutorConfig(srv.url, max_retries=retries, seed=0), camp)
        status = camp.status()
        camp.close()
        print(f"max_retries={retries}: {status.get(RunState.COMPLETED, 0)} completed, {status.get(RunState.FAILED, 0)} failed")
        if summary.retried_run_ids:
            ids = sorted(summary.retried_run_ids)
            print(f"  {summary.retries_total} retries on {len(ids)} runs, first ids {ids[:8]}")
            first = next(e for e in summary.events if e.kind is EventKind.RETRY_SCHEDULED)
            print(f"  e.g. run {first.run_id}: {first.detail}")
        if summary.failed_run_ids:
            print(f"  failed ids (first 8): {sorted(summary.failed_run_ids)[:8]}")


if __name__ == "__main__":
    main()
