"""Glue used by the command line and the demo scripts: draw a configured
design into a campaign, analyze a finished campaign, assemble the report."""

from __future__ import annotations

import json
import os
from pathlib import Path

from .analysis import local_sensitivity, output_table, plot_result, quadrature_moments, sobol_indices
from .campaign import Campaign, RunState, Sample
from .config import CampaignConfigFile
from .events import read_dispatch_events, read_worker_events
from .executor import EVENTS_FILE
from .metrics import NoData, build_timeline, overhead_stats, render_report, runtime_table, speedup
from .sampling import (
    design_from_dict,
    monte_carlo,
    perturbation_design,
    saltelli_design,
    stochastic_collocation,
)

ANALYSIS_FOR_DESIGN = {"saltelli": "sobol", "perturbation": "local", "collocation": "moments"}
RESULT_FILES = {"sobol": "sobol.csv", "local": "local.csv", "moments": "moments.csv"}


def draw_samples(cfg: CampaignConfigFile) -> tuple[list[Sample], dict]:
    """Samples and design metadata for the configured sampler."""
    specs, varied = cfg.specs(), cfg.varied_names
    s = cfg.sampler
    if s.kind == "saltelli":
        samples, design = saltelli_design(specs, varied, s.n, skip=s.skip)
        return samples, design.to_dict()
    if s.kind == "monte_carlo":
        return monte_carlo(specs, varied, s.n, s.seed), {"kind": "monte_carlo", "n": s.n, "seed": s.seed, "varied_names": varied}
    if s.kind == "collocation":
        design = stochastic_collocation(specs, varied, s.order)
        return list(design.nodes), design.to_dict()
    samples, design = perturbation_design(specs, s.reference, varied, s.rel_step)
    return samples, design.to_dict()


def analyze_campaign(campaign: Campaign, method: str | None = None, out_dir=None, bootstrap_n: int = 100):
    """Run the analysis matching the campaign design; write CSV and SVG when ``out_dir`` is given."""
    meta = campaign.manifest.design
    if meta is None:
        raise ValueError("campaign has no design metadata")
    method = method or ANALYSIS_FOR_DESIGN.get(meta["kind"])
    expected = {v: k for k, v in ANALYSIS_FOR_DESIGN.items()}.get(method)
    if expected != meta["kind"]:
        raise ValueError(f"method {method!r} does not apply to a {meta['kind']!r} design")
    results = campaign.load_results()
    design = design_from_dict(meta, campaign.samples(states=RunState))
    if method == "sobol":
        result = sobol_indices(design, results, bootstrap_n)
    elif method == "local":
        result = local_sensitivity(design, results)
    else:
        result = quadrature_moments(design, results)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / RESULT_FILES[method]).write_text(output_table(result).to_csv(), encoding="utf-8")
        plot_result(result, out / "report.svg")
    return result


def report_campaign(
    campaign: Campaign,
    out_dir: str | os.PathLike,
    *,
    worker_log: str | os.PathLike | None = None,
    tick_ms: float = 100.0,
    wall_time_ms: float | None = None,
):
    events_path = campaign.workdir / EVENTS_FILE
    client = read_dispatch_events(events_path) if events_path.exists() else []
    worker = read_worker_events(worker_log) if worker_log else []
    origin = min([e.t for e in client] + [e.t for e in worker], default=None)
    records = campaign.load_results()
    try:
        ov = overhead_stats(records)
    except NoData:
        ov = None
    summary = {"status": {k.value: v for k, v in campaign.status().items()}}
    if wall_time_ms is None and client:
        wall_time_ms = max(e.t for e in client) - min(e.t for e in client)
    if wall_time_ms and records:
        summary["wall_time_ms"] = wall_time_ms
        summary["speedup"] = speedup(records, wall_time_ms)
    return render_report(
        out_dir,
        client=build_timeline(client, tick_ms, origin) if client else None,
        provider=build_timeline(worker, tick_ms, origin) if worker else None,
        overhead=ov,
        runtime=runtime_table(worker or client) if (worker or client) else None,
        summary=summary,
    )


def save_config(campaign: Campaign, cfg: CampaignConfigFile) -> Path:
    path = campaign.workdir / "config.json"
    path.write_text(json.dumps(cfg.model_dump(mode="json"), indent=2) + "\n", encoding="utf-8")
    return path
