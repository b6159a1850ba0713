"""Cross-run comparison tables and plots.

Each series is written twice: a long-format CSV (``label,x,y``) that is the
source of truth, and a self-contained SVG rendered from the same rows.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from html import escape
from pathlib import Path
from typing import Sequence

from .core import FinishReason, RequestResult, read_jsonl
from .telemetry import read_telemetry_csv

COMPARISON_COLUMNS = (
    "label",
    "task",
    "run_id",
    "requests",
    "accuracy_pct",
    "tps",
    "rps",
    "running_time_s",
    "ttft_p50",
    "ttfvt_p50",
    "ttfvt_mean",
    "tbt_p50",
    "e2e_p50",
    "e2e_p99",
    "init_latency_s",
)

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")


class ReportError(ValueError):
    pass


@dataclass
class RunData:
    path: Path
    label: str
    task: str
    manifest: dict
    summary: dict
    results: list[RequestResult]
    telemetry: list[tuple[float, object]]


def discover_runs(paths: Sequence[str | Path]) -> list[Path]:
    """Run directories under ``paths``; a sweep root expands into its cells."""
    found: list[Path] = []
    for p in map(Path, paths):
        if not p.is_dir():
            raise ReportError(f"{p}: not a directory")
        if (p / "summary.json").is_file():
            found.append(p)
            continue
        cells = sorted(d for d in p.iterdir() if d.is_dir() and (d / "summary.json").is_file())
        if not cells:
            raise ReportError(f"{p}: no run outputs (summary.json) found")
        found.extend(cells)
    return found


def load_run(path: Path) -> RunData:
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
        summary = json.loads((path / "summary.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ReportError(f"{path}: missing {Path(exc.filename).name}") from None
    results = [RequestResult.from_dict(d) for d in read_jsonl(path / "requests.jsonl")]
    telemetry = read_telemetry_csv(path / "telemetry.csv") if (path / "telemetry.csv").is_file() else []
    label = manifest.get("label") or path.name
    if manifest.get("cell"):
        label = f"{label}/{manifest['cell']}"
    return RunData(path, label, manifest.get("task", ""), manifest, summary, results, telemetry)


def _get(table: dict | None, key: str):
    return None if not table else table.get(key)


def comparison_rows(runs: Sequence[RunData]) -> list[dict]:
    rows = []
    for run in runs:
        s = run.summary
        acc = s.get("accuracy")
        rows.append(
            {
                "label": run.label,
                "task": run.task,
                "run_id": run.manifest.get("run_id", ""),
                "requests": s.get("request_count", 0),
                "accuracy_pct": None if acc is None else round(acc * 100, 2),
                "tps": s.get("tps"),
                "rps": s.get("rps"),
                "running_time_s": s.get("running_time"),
                "ttft_p50": _get(s.get("ttft"), "p50"),
                "ttfvt_p50": _get(s.get("ttfvt"), "p50"),
                "ttfvt_mean": _get(s.get("ttfvt"), "mean"),
                "tbt_p50": _get(s.get("tbt"), "p50"),
                "e2e_p50": _get(s.get("e2e"), "p50"),
                "e2e_p99": _get(s.get("e2e"), "p99"),
                "init_latency_s": s.get("init_latency"),
            }
        )
    return rows


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


# --- series ---------------------------------------------------------------------------


def telemetry_series(runs: Sequence[RunData], field: str) -> list[tuple[str, float, float]]:
    out = []
    for run in runs:
        for offset, sample in run.telemetry:
            value = getattr(sample, field)
            if value is not None:
                out.append((run.label, offset, float(value)))
    return out


def e2e_cdf(runs: Sequence[RunData]) -> list[tuple[str, float, float]]:
    out = []
    for run in runs:
        e2e = sorted(r.metrics.e2e for r in run.results if r.metrics.finish_reason is not FinishReason.ERROR)
        n = len(e2e)
        out.extend((run.label, v, (i + 1) / n) for i, v in enumerate(e2e))
    return out


def per_dataset(runs: Sequence[RunData]) -> list[tuple[str, str, float | None, float | None, float | None]]:
    rows = []
    for row in comparison_rows(runs):
        rows.append((row["label"], row["task"], row["accuracy_pct"], row["tps"], row["ttfvt_mean"]))
    return rows


# --- SVG -----------------------------------------------------------------------------

_W, _H, _PAD = 640, 360, 56


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def line_chart_svg(
    series: Sequence[tuple[str, float, float]], title: str, xlabel: str, ylabel: str, step: bool = False
) -> str:
    """Minimal line chart; one polyline per label, legend top-right."""
    labels = list(dict.fromkeys(s[0] for s in series))
    xs = [s[1] for s in series] or [0.0]
    ys = [s[2] for s in series] or [0.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1

    def px(x: float) -> float:
        return _PAD + (x - x0) / (x1 - x0) * (_W - 2 * _PAD)

    def py(y: float) -> float:
        return _H - _PAD - (y - y0) / (y1 - y0) * (_H - 2 * _PAD)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<line x1="{_PAD}" y1="{_H - _PAD}" x2="{_W - _PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<line x1="{_PAD}" y1="{_PAD}" x2="{_PAD}" y2="{_H - _PAD}" stroke="black"/>',
        f'<text x="{_W / 2}" y="{_H - 12}" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="14" y="{_H / 2}" text-anchor="middle" transform="rotate(-90 14 {_H / 2})">{escape(ylabel)}</text>',
    ]
    for t in _ticks(x0, x1):
        parts.append(f'<text x="{px(t):.1f}" y="{_H - _PAD + 14}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        parts.append(f'<text x="{_PAD - 4}" y="{py(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    for i, label in enumerate(labels):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(s[1], s[2]) for s in series if s[0] == label]
        coords = []
        for j, (x, y) in enumerate(pts):
            if step and j:
                coords.append(f"{px(x):.2f},{py(pts[j - 1][1]):.2f}")
            coords.append(f"{px(x):.2f},{py(y):.2f}")
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{" ".join(coords)}"/>')
        ly = _PAD + 14 * i
        parts.append(f'<rect x="{_W - _PAD - 150}" y="{ly - 8}" width="10" height="10" fill="{color}"/>')
        parts.append(f'<text x="{_W - _PAD - 136}" y="{ly + 1}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def bar_panels_svg(rows: Sequence[tuple], metrics: Sequence[str], title: str) -> str:
    """One horizontal-bar panel per metric; rows are ``(label, task, *values)``."""
    n_panels = len(metrics)
    panel_w = (_W - _PAD) / n_panels
    bar_h = 16
    height = _PAD + bar_h * (len(rows) + 1) + 40
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{height}" viewBox="0 0 {_W} {height}" '
        'font-family="sans-serif" font-size="11">',
        f'<rect width="{_W}" height="{height}" fill="white"/>',
        f'<text x="{_W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    for k, metric in enumerate(metrics):
        values = [r[2 + k] for r in rows]
        top = max((v for v in values if v is not None), default=0.0) or 1.0
        left = _PAD / 2 + k * panel_w
        parts.append(f'<text x="{left + panel_w / 2:.1f}" y="{_PAD - 14}" text-anchor="middle">{escape(metric)}</text>')
        for i, v in enumerate(values):
            y = _PAD + i * bar_h
            color = _PALETTE[i % len(_PALETTE)]
            width = 0.0 if v is None else v / top * (panel_w - 60)
            parts.append(f'<rect x="{left:.1f}" y="{y}" width="{width:.1f}" height="{bar_h - 4}" fill="{color}"/>')
            parts.append(f'<text x="{left + width + 4:.1f}" y="{y + 10}">{"n/a" if v is None else f"{v:.3g}"}</text>')
    legend_y = _PAD + len(rows) * bar_h + 16
    for i, r in enumerate(rows):
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(
            f'<text x="{_PAD / 2}" y="{legend_y + 14 * i}" fill="{color}">{escape(f"{r[0]} ({r[1]})")}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# --- entry point ---------------------------------------------------------------------


def build_report(run_paths: Sequence[str | Path], out: str | Path) -> list[Path]:
    """Write the comparison table and series for the given runs; returns written files."""
    runs = [load_run(p) for p in discover_runs(run_paths)]
    if not runs:
        raise ReportError("no runs to report")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    def emit(name: str, header: Sequence[str], rows: Sequence[Sequence], svg: str) -> None:
        _write_csv(out / f"{name}.csv", header, rows)
        (out / f"{name}.svg").write_text(svg, encoding="utf-8")
        written.extend([out / f"{name}.csv", out / f"{name}.svg"])

    table = comparison_rows(runs)
    _write_csv(out / "comparison.csv", COMPARISON_COLUMNS, [[r[c] for c in COMPARISON_COLUMNS] for r in table])
    written.append(out / "comparison.csv")

    kv = telemetry_series(runs, "kv_usage")
    emit("kv_usage", ("label", "t_offset_s", "kv_usage"), kv, line_chart_svg(kv, "KV cache usage", "time (s)", "kv usage"))
    running = telemetry_series(runs, "running")
    emit(
        "running",
        ("label", "t_offset_s", "running"),
        running,
        line_chart_svg(running, "Running requests", "time (s)", "running"),
    )
    cdf = e2e_cdf(runs)
    emit("e2e_cdf", ("label", "e2e_s", "cdf"), cdf, line_chart_svg(cdf, "End-to-end latency CDF", "e2e (s)", "CDF", step=True))
    ds = per_dataset(runs)
    metrics = ("accuracy_pct", "tps", "ttfvt_mean")
    emit("per_dataset", ("label", "task", *metrics), ds, bar_panels_svg(ds, metrics, "Per-dataset accuracy, TPS and TTFVT"))
    return written
