"""``bench`` command line: run, score, report, sim serve, sim run."""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from .report import ReportError, build_report
from .runner import (
    ConfigError,
    RunConfig,
    load_sim_config,
    read_config_file,
    run_bench,
    run_sim_dir,
    score_file,
)
from .telemetry import InitTimeout
from .workload import DatasetError

log = logging.getLogger("servebench")

# flag -> (config section, key)
_RUN_OVERRIDES = {
    "endpoint": ("endpoint", "base_url"),
    "model": ("endpoint", "model_name"),
    "max_tokens": ("endpoint", "max_tokens"),
    "timeout_secs": ("endpoint", "timeout"),
    "mode": ("endpoint", "mode"),
    "max_in_flight": ("endpoint", "max_in_flight"),
    "dataset": ("workload", "dataset"),
    "task": ("workload", "task"),
    "batch_size": ("workload", "batch_size"),
    "arrival": ("workload", "arrival"),
    "gamma_shape": ("workload", "gamma_shape"),
    "gamma_scale": ("workload", "gamma_scale"),
    "capacity": ("workload", "capacity"),
    "repeat": ("workload", "repeat"),
    "seed": ("workload", "seed"),
    "metrics_url": ("telemetry", "metrics_url"),
    "engine_log": ("telemetry", "log_file"),
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bench", description="Streaming benchmark harness for LLM serving endpoints.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="benchmark an OpenAI-compatible endpoint")
    run.add_argument("--config", help="JSON run configuration")
    run.add_argument("--endpoint", help="base URL, e.g. http://localhost:8000")
    run.add_argument("--model")
    run.add_argument("--dataset")
    run.add_argument("--task", choices=["gsm8k", "math500", "aime", "gpqa"])
    run.add_argument("--batch-size", type=int)
    run.add_argument("--max-tokens", type=int)
    run.add_argument("--arrival", choices=["batch", "closed_batch", "gamma"])
    run.add_argument("--gamma-shape", type=float)
    run.add_argument("--gamma-scale", type=float)
    run.add_argument("--capacity", type=int)
    run.add_argument("--repeat", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--timeout-secs", type=float)
    run.add_argument("--mode", choices=["reasoning", "standard"])
    run.add_argument("--max-in-flight", type=int)
    run.add_argument("--metrics-url")
    run.add_argument("--engine-log", help="engine log file to tail for stats lines")
    run.add_argument("--init-probe", action="store_true", help="measure time until the endpoint is ready")
    run.add_argument("--label")
    run.add_argument("--out", help="output directory")

    score = sub.add_parser("score", help="re-grade a requests.jsonl offline")
    score.add_argument("requests", help="requests.jsonl or a run directory")
    score.add_argument("--dataset", help="defaults to the path in the run manifest")
    score.add_argument("--task", choices=["gsm8k", "math500", "aime", "gpqa"])
    score.add_argument("--seed", type=int)
    score.add_argument("--out", help="write here instead of rewriting the input")

    report = sub.add_parser("report", help="compare runs and plot series")
    report.add_argument("runs", nargs="+", help="run directories or sweep roots")
    report.add_argument("--out", default="report")

    sim = sub.add_parser("sim", help="serving simulator")
    sim_sub = sim.add_subparsers(dest="sim_command", required=True)
    serve = sim_sub.add_parser("serve", help="serve the simulator over HTTP")
    serve.add_argument("--config", required=True)
    serve.add_argument("--port", type=int, default=8000)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--model", default="sim-model")
    serve.add_argument("--stats-log", help="append engine stats lines to this file")
    srun = sim_sub.add_parser("run", help="offline simulation of a workload")
    srun.add_argument("--config", required=True)
    srun.add_argument("--out", required=True)
    return p


def _run_config(args: argparse.Namespace) -> RunConfig:
    doc = read_config_file(args.config) if args.config else {}
    for flag, (section, key) in _RUN_OVERRIDES.items():
        value = getattr(args, flag)
        if value is not None:
            doc.setdefault(section, {})[key] = value
    if args.out:
        doc["output_dir"] = args.out
    if args.label:
        doc["label"] = args.label
    if args.init_probe:
        doc["init_probe"] = True
    return RunConfig.from_dict(doc)


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    out = run_bench(cfg)
    print(f"wrote {out}")
    return 0


def _cmd_score(args: argparse.Namespace) -> int:
    path = Path(args.requests)
    run_dir = path if path.is_dir() else path.parent
    if path.is_dir():
        path = path / "requests.jsonl"
    dataset, task, seed = args.dataset, args.task, args.seed
    manifest_path = run_dir / "manifest.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        wl = (manifest.get("config") or {}).get("workload") or {}
        dataset = dataset or (manifest.get("dataset") or {}).get("path")
        task = task or manifest.get("task")
        seed = wl.get("seed", manifest.get("seed", 0)) if seed is None else seed
    if not dataset or not task:
        raise ConfigError("score needs --dataset and --task (no manifest to take them from)")
    acc = score_file(path, Path(dataset), task, Path(args.out) if args.out else None, seed or 0)
    print("accuracy: n/a" if acc is None else f"accuracy: {acc * 100:.2f}%")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    for path in build_report(args.runs, args.out):
        print(path)
    return 0


def _cmd_sim(args: argparse.Namespace) -> int:
    doc = read_config_file(args.config)
    if args.sim_command == "run":
        out = run_sim_dir(doc, Path(args.out))
        print(f"wrote {out}")
        return 0
    from .simengine.server import serve_forever

    config = load_sim_config(doc)
    try:
        asyncio.run(serve_forever(config, args.host, args.port, model_name=args.model, stats_log=args.stats_log))
    except KeyboardInterrupt:
        print("simulator stopped", file=sys.stderr)
    return 0


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handlers = {"run": _cmd_run, "score": _cmd_score, "report": _cmd_report, "sim": _cmd_sim}
    try:
        return handlers[args.command](args)
    except (ConfigError, DatasetError, ReportError, InitTimeout) as exc:
        print(f"bench: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
