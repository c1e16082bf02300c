"""Command-line entry point: ``sensfan <subcommand> ...``.

Exit codes: 0 success, 1 runs failed, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
import time
from pathlib import Path

from .campaign import Campaign, CampaignError, ParameterSpec, RunState, Uniform
from .config import ConfigError, ExecutorCfg, load_config, parse_config
from .executor import ExecutorConfig, run as run_samples
from .models import BuiltInModel, SubprocessModel
from .pipeline import RESULT_FILES, analyze_campaign, draw_samples, report_campaign, save_config
from .analysis import output_table
from .sampling import saltelli_design
from .worker import MockCloudConfig, mock_cloud_serve, serve

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2
CAMPAIGN_ENV = "SENSFAN_CAMPAIGN"

log = logging.getLogger("sensfan")


def _campaign_dir(args) -> Path:
    d = args.campaign or os.environ.get(CAMPAIGN_ENV)
    if not d:
        raise ConfigError(f"no campaign directory (use --campaign or set {CAMPAIGN_ENV})")
    return Path(d)


def _bind(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HOST:PORT, got {text!r}") from None


def _param(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    if "," in value:
        return key, [float(v) for v in value.split(",")]
    try:
        return key, float(value)
    except ValueError:
        return key, value


def _adapter(args):
    if args.model == "subprocess":
        if not args.command:
            raise ConfigError("--model subprocess needs --command")
        return SubprocessModel(args.command, args.model_timeout_s)
    return BuiltInModel(args.model, dict(args.param or []), args.delay_ms)


# --------------------------------------------------------------------------


def cmd_sample(args) -> int:
    cfg = load_config(args.config)
    samples, design = draw_samples(cfg)
    workdir = _campaign_dir(args)
    if (workdir / "campaign.json").exists():
        with Campaign.open(workdir) as camp:
            same = (
                [p.to_dict() for p in camp.manifest.parameters] == [p.to_dict() for p in cfg.specs()]
                and camp.manifest.design == json.loads(json.dumps(design))
                and len(camp) == len(samples)
            )
        if not same:
            raise ConfigError(f"{workdir} already holds a different campaign")
        print(f"{len(samples)} samples written to {workdir} (unchanged)")
        return EXIT_OK
    with Campaign.create(cfg.name, cfg.specs(), workdir) as camp:
        camp.set_design(design)
        save_config(camp, cfg)
        n = camp.add_samples(samples)
    print(f"{n} samples written to {workdir}")
    return EXIT_OK


def _executor_config(args, camp: Campaign) -> ExecutorConfig:
    saved = camp.workdir / "config.json"
    ex = ExecutorCfg()
    if args.config:
        ex = load_config(args.config).executor
    elif saved.exists():
        ex = parse_config(json.loads(saved.read_text())).executor
    return ex.build(
        args.endpoint,
        max_load=args.max_load,
        request_timeout_ms=args.timeout_ms,
        max_retries=args.max_retries,
    )


def _print_summary(summary, camp: Campaign) -> None:
    doc = summary.to_dict()
    doc["campaign_status"] = {k.value: v for k, v in camp.status().items()}
    print(json.dumps(doc, indent=2))


def cmd_run(args) -> int:
    workdir = _campaign_dir(args)
    with Campaign.open(workdir) as camp:
        config = _executor_config(args, camp)
        summary = run_samples(None, config, camp)
        _print_summary(summary, camp)
        failed = camp.status().get(RunState.FAILED, 0)
    return EXIT_FAILED if failed else EXIT_OK


def cmd_serve(args) -> int:
    host, port = args.bind
    handle = serve(_adapter(args), host, port, event_log=args.event_log)
    print(f"serving {args.model} on {handle.url}", flush=True)
    handle.wait()
    handle.close()
    return EXIT_OK


def _mock_config(args) -> MockCloudConfig:
    return MockCloudConfig(
        cold_start_ms=args.cold_start_ms,
        max_instances=args.max_instances,
        instance_concurrency=args.instance_concurrency,
        idle_reclaim_ms=args.idle_reclaim_ms,
        failure_rate=args.failure_rate,
        provision_fraction=args.provision_fraction,
        queue_when_full=args.queue_when_full,
        seed=args.seed,
    )


def cmd_mock_cloud(args) -> int:
    host, port = args.bind
    handle = mock_cloud_serve(_adapter(args), _mock_config(args), host, port, event_log=args.event_log)
    print(f"mock cloud ({args.model}, max {args.max_instances} instances) on {handle.url}", flush=True)
    handle.wait()
    handle.close()
    return EXIT_OK


def cmd_analyze(args) -> int:
    workdir = _campaign_dir(args)
    out = Path(args.out) if args.out else workdir / "analysis"
    with Campaign.open(workdir) as camp:
        try:
            result = analyze_campaign(camp, args.method, out, args.bootstrap)
        except (ValueError, KeyError) as exc:
            raise ConfigError(str(exc)) from None
    print(output_table(result).to_text())
    return EXIT_OK


def cmd_report(args) -> int:
    workdir = _campaign_dir(args)
    out = Path(args.out) if args.out else workdir / "report"
    with Campaign.open(workdir) as camp:
        bundle = report_campaign(camp, out, worker_log=args.worker_log, tick_ms=args.tick_ms)
    for f in bundle.files:
        print(f)
    return EXIT_OK


DEMO_SCALES = {
    "small": dict(n=256, delay_ms=20.0, max_load=64, max_instances=64),
    "medium": dict(n=2**13, delay_ms=0.0, max_load=256, max_instances=256),
}


def cmd_demo(args) -> int:
    scale = DEMO_SCALES[args.scale]
    workdir = Path(args.workdir) if args.workdir else Path(tempfile.mkdtemp(prefix="sensfan-demo-"))
    specs = [ParameterSpec(f"x{i}", Uniform(-math.pi, math.pi)) for i in (1, 2, 3)]
    samples, design = saltelli_design(specs, [s.name for s in specs], scale["n"])
    t0 = time.perf_counter()
    with Campaign.create("ishigami-demo", specs, workdir) as camp:
        camp.set_design(design.to_dict())
        camp.add_samples(samples)
        mock = MockCloudConfig(max_instances=scale["max_instances"], seed=args.seed)
        worker_log = workdir / "worker_events.ndjson"
        with mock_cloud_serve(BuiltInModel("ishigami", {"a": 7.0, "b": 0.1}, scale["delay_ms"]), mock, event_log=worker_log) as h:
            summary = run_samples(None, ExecutorConfig(h.url, max_load=scale["max_load"], seed=args.seed), camp)
        result = analyze_campaign(camp, "sobol", workdir / "analysis")
        report_campaign(camp, workdir / "report", worker_log=worker_log, wall_time_ms=summary.wall_time_ms)
    print(f"campaign: {workdir}")
    print(
        f"{summary.completed}/{summary.total} runs completed, {summary.retries_total} retries, "
        f"wall {summary.wall_time_ms / 1000:.2f} s, speedup {summary.speedup:.1f}x"
    )
    print(output_table(result).to_text())
    print(f"total time {time.perf_counter() - t0:.1f} s")
    return EXIT_OK if summary.failed == 0 else EXIT_FAILED


# --------------------------------------------------------------------------


def _add_model_args(p):
    p.add_argument("--model", choices=["ishigami", "linear", "sleep", "subprocess"], default="ishigami")
    p.add_argument("--param", type=_param, action="append", metavar="KEY=VALUE",
                   help="model parameter, e.g. a=7 or coefficients=2,3,5 or duration_ms=150")
    p.add_argument("--delay-ms", type=float, default=0.0, help="extra per-sample delay added to the model")
    p.add_argument("--command", nargs="+", help="subprocess model command line")
    p.add_argument("--model-timeout-s", type=float, default=None, help="subprocess model timeout")
    p.add_argument("--bind", type=_bind, default=("127.0.0.1", 8080), metavar="HOST:PORT")
    p.add_argument("--event-log", help="write provider-side events to this ndjson file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sensfan", description="Sensitivity analysis with fan-out to stateless HTTP workers.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command_name", required=True)

    p = sub.add_parser("sample", help="draw samples from a config file into a campaign")
    p.add_argument("config", help="campaign config (YAML or JSON)")
    p.add_argument("--campaign", help=f"campaign directory (default ${CAMPAIGN_ENV})")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("serve", help="serve a model over HTTP, one sample per request")
    _add_model_args(p)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("mock-cloud", help="serve a model behind an emulated serverless instance pool")
    _add_model_args(p)
    p.add_argument("--max-instances", type=int, default=1000)
    p.add_argument("--cold-start-ms", type=float, default=0.0)
    p.add_argument("--failure-rate", type=float, default=0.0, help="probability of an injected HTTP 500")
    p.add_argument("--instance-concurrency", type=int, default=1)
    p.add_argument("--idle-reclaim-ms", type=float, default=60_000.0)
    p.add_argument("--provision-fraction", type=float, default=1.0)
    p.add_argument("--queue-when-full", action="store_true", help="queue instead of answering 429")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_mock_cloud)

    p = sub.add_parser("run", help="dispatch pending campaign runs to an endpoint")
    p.add_argument("--campaign", help=f"campaign directory (default ${CAMPAIGN_ENV})")
    p.add_argument("--config", help="config file whose executor section overrides the saved one")
    p.add_argument("--endpoint", help="worker URL")
    p.add_argument("--max-load", type=int, help="maximum requests in flight")
    p.add_argument("--timeout-ms", type=int, help="client-side request timeout")
    p.add_argument("--max-retries", type=int, help="retries per run before it is marked failed")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("analyze", help="compute sensitivity measures from completed runs")
    p.add_argument("--campaign", help=f"campaign directory (default ${CAMPAIGN_ENV})")
    p.add_argument("--method", choices=sorted(RESULT_FILES), help="default: matches the campaign design")
    p.add_argument("--out", help="output directory (default CAMPAIGN/analysis)")
    p.add_argument("--bootstrap", type=int, default=100, help="bootstrap resamples for Sobol confidence intervals")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="timelines, overheads and runtimes from the event logs")
    p.add_argument("--campaign", help=f"campaign directory (default ${CAMPAIGN_ENV})")
    p.add_argument("--worker-log", help="provider-side event log to include")
    p.add_argument("--out", help="output directory (default CAMPAIGN/report)")
    p.add_argument("--tick-ms", type=float, default=100.0)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("demo", help="end-to-end Ishigami run against an in-process mock cloud")
    p.add_argument("--scale", choices=sorted(DEMO_SCALES), default="small")
    p.add_argument("--workdir", help="campaign directory (default: a new temporary directory)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, CampaignError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
