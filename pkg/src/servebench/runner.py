"""Run lifecycle: configuration, dispatch, telemetry capture and persistence.

A run directory holds ``manifest.json``, ``requests.jsonl``, ``events.jsonl``,
``telemetry.csv`` and ``summary.json``; everything downstream (scoring,
reports) works from those files alone.
"""

from __future__ import annotations

import asyncio
import hashlib
import itertools
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any

from . import __version__
from .client import OPEN_LOOP_DEFAULT_IN_FLIGHT, Collector, EndpointConfig, RunClock, make_client, run_closed_batch, run_open_loop
from .core import DatasetRecord, RequestResult, TaskKind, aggregate, read_jsonl, write_json, write_jsonl
from .prng import PRNG_ID
from .scoring import extract_answer, grade
from .simengine.engine import SIM_EPOCH, SimConfig, run_id_for, run_sim
from .simengine.presets import preset
from .telemetry import (
    SGLANG_LABELS,
    VLLM_LABELS,
    EngineTelemetrySample,
    align_telemetry,
    measure_init_latency,
    poll_metrics_endpoint,
    tail_log_file,
    write_telemetry_csv,
)
from .workload import WorkloadPlan, dataset_hash, group_batches, load_dataset

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Bad or inconsistent run configuration."""


# --- configuration ---------------------------------------------------------------


@dataclass
class WorkloadConfig:
    dataset: str | None = None
    task: str = "gsm8k"
    arrival: str = "closed_batch"
    batch_size: int = 8
    capacity: int | None = None
    repeat: int = 1
    seed: int = 0
    gamma_shape: float = 2.0
    gamma_scale: float = 0.5
    synthetic: dict[str, Any] | None = None

    def load_records(self) -> tuple[list[DatasetRecord], dict[str, Any]]:
        """Records plus a manifest description of where they came from."""
        if self.dataset:
            path = Path(self.dataset)
            if not path.is_file():
                raise ConfigError(f"dataset not found: {path}")
            try:
                records = load_dataset(path, self.task, self.seed)
            except ValueError as exc:
                raise ConfigError(str(exc)) from None
            return records, {"path": str(path), "sha256": dataset_hash(path), "task": self.task}
        if self.synthetic:
            records = synthetic_records(**self.synthetic)
            blob = json.dumps(self.synthetic, sort_keys=True).encode()
            return records, {"synthetic": self.synthetic, "sha256": hashlib.sha256(blob).hexdigest()}
        raise ConfigError("workload needs a dataset path or a synthetic spec")

    def plan(self, records: list[DatasetRecord]) -> WorkloadPlan:
        arrival = {"batch": "closed_batch"}.get(self.arrival, self.arrival)
        try:
            return WorkloadPlan(
                records=tuple(records),
                arrival=arrival,
                batch_size=self.batch_size,
                gamma_shape=self.gamma_shape,
                gamma_scale=self.gamma_scale,
                capacity=self.capacity if self.capacity is not None else len(records),
                repeat=self.repeat,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


def synthetic_records(
    count: int, task: str = "gsm8k", difficulty_tags: list[int] | None = None, prompt_chars: int = 200
) -> list[DatasetRecord]:
    """Placeholder questions for simulator-only runs; tags cycle through ``difficulty_tags``."""
    records = []
    for i in range(count):
        tag = difficulty_tags[i % len(difficulty_tags)] if difficulty_tags else None
        body = f"Synthetic question {i}. " + "x" * max(prompt_chars - 24, 0)
        records.append(DatasetRecord(id=f"syn-{i:05d}", prompt=body, gold_answer="0", task_kind=task, difficulty_tag=tag))
    return records


@dataclass
class TelemetryConfig:
    metrics_url: str | None = None
    log_file: str | None = None
    period: float = 1.0
    labels: str | dict[str, list[str]] = "vllm"

    def label_map(self) -> dict[str, tuple[str, ...]]:
        if isinstance(self.labels, dict):
            return {k: tuple(v) for k, v in self.labels.items()}
        maps = {"vllm": VLLM_LABELS, "sglang": SGLANG_LABELS}
        if self.labels not in maps:
            raise ConfigError(f"unknown telemetry label map {self.labels!r}")
        return maps[self.labels]


@dataclass
class RunConfig:
    endpoint: EndpointConfig
    workload: WorkloadConfig
    telemetry: TelemetryConfig = field(default_factory=TelemetryConfig)
    output_dir: str = "runs/out"
    sweep: dict[str, list[int]] = field(default_factory=dict)
    init_probe: bool = False
    init_deadline: float = 600.0
    label: str = ""

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RunConfig":
        try:
            ep = dict(d.get("endpoint") or {})
            if "base_url" not in ep:
                raise ConfigError("endpoint.base_url is required")
            ep.setdefault("model_name", "default")
            mode = ep.pop("mode", "reasoning")
            endpoint = EndpointConfig.for_mode(ep.pop("base_url"), ep.pop("model_name"), mode, **ep)
            sweep = d.get("sweep") or {}
            unknown = set(sweep) - {"max_tokens", "batch_size"}
            if unknown:
                raise ConfigError(f"sweep supports max_tokens and batch_size, not {sorted(unknown)}")
            return cls(
                endpoint=endpoint,
                workload=WorkloadConfig(**(d.get("workload") or {})),
                telemetry=TelemetryConfig(**(d.get("telemetry") or {})),
                output_dir=d.get("output_dir", "runs/out"),
                sweep={k: [int(x) for x in v] for k, v in sweep.items()},
                init_probe=bool(d.get("init_probe", False)),
                init_deadline=float(d.get("init_deadline", 600.0)),
                label=d.get("label", ""),
            )
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def describe(self) -> dict[str, Any]:
        return {
            "endpoint": asdict(self.endpoint),
            "workload": asdict(self.workload),
            "telemetry": asdict(self.telemetry),
            "sweep": self.sweep,
            "init_probe": self.init_probe,
            "label": self.label,
        }

    def cells(self) -> list[tuple[str | None, "RunConfig"]]:
        """(subdirectory, config) for each sweep cell; a single ``(None, self)`` without a sweep."""
        if not self.sweep:
            return [(None, self)]
        tokens = self.sweep.get("max_tokens") or [self.endpoint.max_tokens]
        batches = self.sweep.get("batch_size") or [self.workload.batch_size]
        out = []
        for mt, bs in itertools.product(tokens, batches):
            cell = replace(
                self,
                endpoint=replace(self.endpoint, max_tokens=mt),
                workload=replace(self.workload, batch_size=bs),
                sweep={},
            )
            out.append((f"mt{mt}_bs{bs}", cell))
        return out


def load_sim_config(d: dict[str, Any]) -> SimConfig:
    d = dict(d.get("sim", d))
    name = d.pop("preset", None)
    try:
        if name is not None:
            overrides = dict(d)
            base = preset(name)
            merged = base.to_dict()
            for key, value in overrides.items():
                if isinstance(value, dict) and isinstance(merged.get(key), dict):
                    merged[key] = {**merged[key], **value}
                else:
                    merged[key] = value
            return SimConfig.from_dict(merged)
        return SimConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad sim config: {exc}") from None


def read_config_file(path: str | Path) -> dict[str, Any]:
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


# --- grading -------------------------------------------------------------------------


def grade_results(results: list[RequestResult], records: dict[str, DatasetRecord]) -> list[RequestResult]:
    """Attach extracted answers and verdicts; raises listing unknown record ids."""
    missing = sorted({r.record_id for r in results} - set(records))
    if missing:
        raise ConfigError(f"results reference unknown record ids: {', '.join(missing)}")
    graded = []
    for r in results:
        rec = records[r.record_id]
        extracted = extract_answer(r.raw_visible_text, rec.task_kind)
        outcome = grade(extracted, rec.gold_answer, rec.task_kind)
        graded.append(replace(r, extracted_answer=outcome.extracted, correct=outcome.correct))
    return graded


# --- persistence ---------------------------------------------------------------------


def _run_id(describe: dict[str, Any]) -> str:
    blob = json.dumps(describe, sort_keys=True, default=str).encode()
    return "run-" + hashlib.sha256(blob).hexdigest()[:12]


def write_run_dir(
    out: Path,
    manifest: dict[str, Any],
    results: list[RequestResult],
    event_rows: list[dict[str, Any]],
    telemetry: list[tuple[float, EngineTelemetrySample]],
    window: float,
    init_latency: float | None = None,
) -> None:
    out.mkdir(parents=True, exist_ok=True)
    order = sorted(range(len(results)), key=lambda i: results[i].request_id)
    results = [results[i] for i in order]
    rows = {row["request_id"]: row for row in event_rows}
    write_json(out / "manifest.json", manifest)
    write_jsonl(out / "requests.jsonl", (r.to_dict() for r in results))
    write_jsonl(out / "events.jsonl", (rows[r.request_id] for r in results))
    write_telemetry_csv(out / "telemetry.csv", telemetry)
    if results:
        summary = aggregate(results, window, init_latency).to_dict()
    else:
        summary = {"request_count": 0, "running_time": window}
    write_json(out / "summary.json", summary)


def load_run_results(run_dir: Path) -> list[RequestResult]:
    return [RequestResult.from_dict(d) for d in read_jsonl(run_dir / "requests.jsonl")]


# --- bench run --------------------------------------------------------------------------


async def _collect_telemetry(cfg: TelemetryConfig, stop: asyncio.Event, sink: list[EngineTelemetrySample]) -> None:
    async def drain(stream) -> None:
        async for sample in stream:
            sink.append(sample)

    tasks = []
    if cfg.metrics_url:
        tasks.append(drain(poll_metrics_endpoint(cfg.metrics_url, cfg.period, cfg.label_map(), stop)))
    if cfg.log_file:
        tasks.append(drain(tail_log_file(cfg.log_file, cfg.period, stop)))
    if tasks:
        await asyncio.gather(*tasks)


async def execute_cell(cfg: RunConfig, records: list[DatasetRecord], run_id: str):
    plan = cfg.workload.plan(records)
    schedule = plan.schedule()
    clock = RunClock()
    collector = Collector()
    samples: list[EngineTelemetrySample] = []
    stop = asyncio.Event()
    telemetry_task = asyncio.create_task(_collect_telemetry(cfg.telemetry, stop, samples))
    limit = cfg.endpoint.max_in_flight
    if limit is None and plan.arrival == "gamma":
        limit = OPEN_LOOP_DEFAULT_IN_FLIGHT
    async with make_client(limit) as client:
        if plan.arrival == "closed_batch":
            for batch in group_batches(schedule):
                await run_closed_batch(cfg.endpoint, batch, clock, run_id, client, collector)
        else:
            await run_open_loop(cfg.endpoint, schedule, clock, run_id, client, collector)
    window = clock.now() / 1e9
    stop.set()
    await telemetry_task
    samples.sort(key=lambda s: s.t or 0.0)
    return collector, align_telemetry(samples, clock.epoch_wall), window, clock.epoch_wall


def run_bench(cfg: RunConfig) -> Path:
    """Execute every sweep cell; returns the output directory."""
    records, dataset_meta = cfg.workload.load_records()
    # Validate every cell's plan before anything touches disk.
    for _, cell in cfg.cells():
        cell.workload.plan(records)
    by_id = {r.id: r for r in records}
    out_root = Path(cfg.output_dir)
    cells = cfg.cells()
    base_manifest = {
        "tool": "servebench",
        "version": __version__,
        "prng": PRNG_ID,
        "seed": cfg.workload.seed,
        "dataset": dataset_meta,
        "config": cfg.describe(),
        "label": cfg.label or cfg.endpoint.model_name,
    }
    if len(cells) > 1:
        out_root.mkdir(parents=True, exist_ok=True)
        write_json(
            out_root / "manifest.json",
            {**base_manifest, "cells": [name for name, _ in cells]},
        )
    for name, cell in cells:
        out = out_root / name if name else out_root
        init_latency = None
        if cell.init_probe:
            init_latency = measure_init_latency(cell.endpoint.base_url, deadline=cell.init_deadline)
        describe = cell.describe()
        run_id = _run_id({"config": describe, "dataset": dataset_meta})
        collector, telemetry, window, epoch_wall = asyncio.run(execute_cell(cell, records, run_id))
        results = grade_results(collector.results, by_id)
        manifest = {
            **base_manifest,
            "run_id": run_id,
            "config": describe,
            "plan": cell.workload.plan(records).describe(),
            "cell": name,
            "task": cell.workload.task,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(epoch_wall)),
        }
        write_run_dir(out, manifest, results, collector.event_rows, telemetry, window, init_latency)
        log.info("wrote %s (%d requests, %.2fs)", out, len(results), window)
    return out_root


# --- sim run ----------------------------------------------------------------------------


def run_sim_dir(config_doc: dict[str, Any], out: Path) -> Path:
    """Offline simulator run writing the standard run-directory files."""
    sim_cfg = load_sim_config(config_doc)
    wl = WorkloadConfig(**(config_doc.get("workload") or {"synthetic": {"count": 16}}))
    records, dataset_meta = wl.load_records()
    plan = wl.plan(records)
    output = run_sim(sim_cfg, plan.schedule())
    results = grade_results(output.results, {r.id: r for r in records}) if output.results else []
    # The trace is flushed to a whole second; the run itself ends at the last completion.
    window = max((r.timing.t_done for r in output.results), default=0) / 1e9
    manifest = {
        "tool": "servebench",
        "version": __version__,
        "prng": PRNG_ID,
        "seed": wl.seed,
        "dataset": dataset_meta,
        "plan": plan.describe(),
        "sim": sim_cfg.to_dict(),
        "run_id": run_id_for(sim_cfg),
        "label": sim_cfg.label or "sim",
        "task": wl.task,
    }
    telemetry = align_telemetry(output.telemetry, SIM_EPOCH)
    write_run_dir(out, manifest, results, output.event_rows, telemetry, window if window > 0 else 1.0)
    (out / "engine.log").write_text("".join(line + "\n" for line in output.log_lines), encoding="utf-8")
    return out


# --- offline scoring -------------------------------------------------------------------


def score_file(
    requests_path: Path, dataset_path: Path, task: str | TaskKind, out_path: Path | None = None, seed: int = 0
) -> float | None:
    """Re-grade a requests.jsonl against a dataset; returns accuracy (None if nothing graded)."""
    records = {r.id: r for r in load_dataset(dataset_path, task, seed)}
    results = [RequestResult.from_dict(d) for d in read_jsonl(requests_path)]
    graded = grade_results(results, records)
    write_jsonl(out_path or requests_path, (r.to_dict() for r in graded))
    if not graded:
        return None
    return sum(1 for r in graded if r.correct) / len(graded)
