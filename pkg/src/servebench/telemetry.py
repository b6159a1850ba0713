"""Engine-side observables: stats log lines, Prometheus scrapes, init latency."""

from __future__ import annotations

import asyncio
import calendar
import csv
import heapq
import logging
import re
import time
from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from pathlib import Path
from typing import AsyncIterator, Iterable, Mapping, Sequence

import httpx

log = logging.getLogger(__name__)

CSV_HEADER = ("t_offset_s", "prompt_tps", "gen_tps", "running", "waiting", "kv_usage", "prefix_hit")


class TelemetryParseError(ValueError):
    pass


class InitTimeout(TimeoutError):
    pass


@dataclass(frozen=True)
class EngineTelemetrySample:
    t: float | None
    prompt_tps: float | None = None
    gen_tps: float | None = None
    running: int | None = None
    waiting: int | None = None
    kv_usage: float | None = None
    prefix_hit: float | None = None

    def __post_init__(self) -> None:
        for name in ("running", "waiting"):
            v = getattr(self, name)
            if v is not None and v < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("kv_usage", "prefix_hit"):
            v = getattr(self, name)
            if v is not None and not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")


# --- log lines --------------------------------------------------------------

_STATS_ANCHOR = "Avg prompt throughput"
_FIELDS = {
    "prompt_tps": re.compile(r"Avg prompt throughput:\s*([^\s,]+)\s*tokens/s"),
    "gen_tps": re.compile(r"Avg generation throughput:\s*([^\s,]+)\s*tokens/s"),
    "running": re.compile(r"Running:\s*([^\s,]+)\s*reqs"),
    "waiting": re.compile(r"Waiting:\s*([^\s,]+)\s*reqs"),
    "kv_usage": re.compile(r"(?:GPU )?KV cache usage:\s*([^\s,%\\]+)\s*\\?%"),
    "prefix_hit": re.compile(r"Prefix cache hit rate:\s*([^\s,%\\]+)\s*\\?%"),
}
_PERCENT_FIELDS = ("kv_usage", "prefix_hit")
_INT_FIELDS = ("running", "waiting")
_STAMP = re.compile(r"(\d{2})-(\d{2})\s+(\d{2}):(\d{2}):(\d{2})")


def _parse_stamp(line: str, year: int) -> float | None:
    m = _STAMP.search(line)
    if m is None:
        return None
    month, day, hh, mm, ss = (int(g) for g in m.groups())
    return float(calendar.timegm((year, month, day, hh, mm, ss, 0, 0, 0)))


def parse_engine_log_line(line: str, year: int | None = None) -> EngineTelemetrySample | None:
    """Parse one vLLM-style periodic stats line; any other line yields None.

    Matching anchors on field labels, so prefixes such as ``INFO 05-10 ...``
    are irrelevant.  The ``MM-DD HH:MM:SS`` stamp, when present, becomes the
    sample time (UTC, in ``year``).  Percentages are stored as fractions.
    """
    if _STATS_ANCHOR not in line:
        return None
    values: dict[str, float | int] = {}
    for name, pattern in _FIELDS.items():
        m = pattern.search(line)
        if m is None:
            continue
        raw = m.group(1)
        try:
            if name in _INT_FIELDS:
                values[name] = int(raw)
            else:
                number = Decimal(raw)
                if not number.is_finite():
                    raise InvalidOperation
                if name in _PERCENT_FIELDS:
                    number = number / 100
                values[name] = float(number)
        except (ValueError, InvalidOperation):
            raise TelemetryParseError(f"unparseable {name} value {raw!r}") from None
    t = _parse_stamp(line, year if year is not None else time.gmtime().tm_year)
    return EngineTelemetrySample(t=t, **values)


def parse_engine_log(lines: Iterable[str], year: int | None = None) -> list[EngineTelemetrySample]:
    out = []
    for line in lines:
        sample = parse_engine_log_line(line, year)
        if sample is not None:
            out.append(sample)
    return out


async def tail_log_file(
    path: str | Path, period: float = 1.0, stop: asyncio.Event | None = None, year: int | None = None
) -> AsyncIterator[EngineTelemetrySample]:
    """Follow a growing engine log, yielding stats samples as lines arrive."""
    stop = stop or asyncio.Event()
    pos = 0
    partial = ""
    while True:
        try:
            with open(path, encoding="utf-8", errors="replace") as f:
                f.seek(pos)
                chunk = f.read()
                pos = f.tell()
        except FileNotFoundError:
            chunk = ""
        if chunk:
            lines = (partial + chunk).split("\n")
            partial = lines.pop()
            for line in lines:
                try:
                    sample = parse_engine_log_line(line, year)
                except TelemetryParseError as exc:
                    log.warning("skipping stats line: %s", exc)
                    continue
                if sample is not None:
                    yield sample
        if stop.is_set():
            return
        try:
            await asyncio.wait_for(stop.wait(), timeout=period)
        except asyncio.TimeoutError:
            pass


# --- Prometheus exposition -----------------------------------------------------

_SERIES = re.compile(
    r"^([a-zA-Z_:][a-zA-Z0-9_:]*)(?:\{(.*)\})?\s+(\S+)(?:\s+-?\d+)?\s*$"
)
_LABEL = re.compile(r'\s*([a-zA-Z_][a-zA-Z0-9_]*)\s*=\s*"((?:[^"\\]|\\.)*)"\s*(?:,|$)')
_NAME = re.compile(r"^([a-zA-Z_:][a-zA-Z0-9_:]*)")


def _parse_labels(body: str) -> dict[str, str]:
    labels: dict[str, str] = {}
    pos = 0
    while pos < len(body):
        m = _LABEL.match(body, pos)
        if m is None:
            raise ValueError("bad label set")
        labels[m.group(1)] = m.group(2)
        pos = m.end()
    return labels


def parse_exposition(text: str) -> dict[str, list[tuple[dict[str, str], float]]]:
    """Series values by metric name; a malformed line drops its whole family."""
    families: dict[str, list[tuple[dict[str, str], float]]] = {}
    broken: set[str] = set()
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        m = _SERIES.match(line)
        try:
            if m is None:
                raise ValueError
            labels = _parse_labels(m.group(2) or "")
            value = float(m.group(3))
        except ValueError:
            name = _NAME.match(line)
            if name:
                broken.add(name.group(1))
            continue
        families.setdefault(m.group(1), []).append((labels, value))
    return {k: v for k, v in families.items() if k not in broken}


VLLM_LABELS: dict[str, tuple[str, ...]] = {
    "kv_usage": ("vllm:gpu_cache_usage_perc", "vllm:kv_cache_usage_perc"),
    "running": ("vllm:num_requests_running",),
    "waiting": ("vllm:num_requests_waiting",),
    "prefix_hit": ("vllm:gpu_prefix_cache_hit_rate",),
    "prompt_tokens_total": ("vllm:prompt_tokens_total",),
    "generation_tokens_total": ("vllm:generation_tokens_total",),
}

SGLANG_LABELS: dict[str, tuple[str, ...]] = {
    "kv_usage": ("sglang:token_usage",),
    "running": ("sglang:num_running_reqs",),
    "waiting": ("sglang:num_queue_reqs",),
    "prefix_hit": ("sglang:cache_hit_rate",),
    "gen_tps": ("sglang:gen_throughput",),
    "prompt_tokens_total": ("sglang:prompt_tokens_total",),
    "generation_tokens_total": ("sglang:generation_tokens_total",),
}


def _family_value(
    families: Mapping[str, list[tuple[dict[str, str], float]]], names: Sequence[str], how: str
) -> float | None:
    for name in names:
        series = families.get(name)
        if series:
            vals = [v for _, v in series]
            return sum(vals) if how == "sum" else sum(vals) / len(vals)
    return None


class MetricsSampler:
    """Turns successive exposition scrapes into samples; counter families become rates."""

    def __init__(self, label_map: Mapping[str, Sequence[str]] = VLLM_LABELS):
        self.label_map = label_map
        self._prev: tuple[float, float | None, float | None] | None = None

    def sample(self, text: str, t: float) -> EngineTelemetrySample:
        fam = parse_exposition(text)
        get = lambda key, how="sum": _family_value(fam, self.label_map.get(key, ()), how)  # noqa: E731
        running, waiting = get("running"), get("waiting")
        kv, hit = get("kv_usage", "mean"), get("prefix_hit", "mean")
        prompt_total, gen_total = get("prompt_tokens_total"), get("generation_tokens_total")
        prompt_tps, gen_tps = None, get("gen_tps")
        if self._prev is not None:
            t0, p0, g0 = self._prev
            dt = t - t0
            if dt > 0:
                if prompt_total is not None and p0 is not None:
                    prompt_tps = max(prompt_total - p0, 0.0) / dt
                if gen_tps is None and gen_total is not None and g0 is not None:
                    gen_tps = max(gen_total - g0, 0.0) / dt
        self._prev = (t, prompt_total, gen_total)
        clamp = lambda v: None if v is None else min(max(v, 0.0), 1.0)  # noqa: E731
        return EngineTelemetrySample(
            t=t,
            prompt_tps=prompt_tps,
            gen_tps=gen_tps,
            running=None if running is None else int(running),
            waiting=None if waiting is None else int(waiting),
            kv_usage=clamp(kv),
            prefix_hit=clamp(hit),
        )


async def poll_metrics_endpoint(
    url: str,
    period: float = 1.0,
    label_map: Mapping[str, Sequence[str]] = VLLM_LABELS,
    stop: asyncio.Event | None = None,
    client: httpx.AsyncClient | None = None,
) -> AsyncIterator[EngineTelemetrySample]:
    """Scrape ``url`` every ``period`` seconds until ``stop`` is set.

    Unreachable scrapes are logged and leave a gap; the stream keeps going.
    """
    stop = stop or asyncio.Event()
    sampler = MetricsSampler(label_map)
    own = client is None
    client = client or httpx.AsyncClient(timeout=max(period, 1.0))
    try:
        while not stop.is_set():
            t = time.time()
            try:
                resp = await client.get(url)
                resp.raise_for_status()
            except httpx.HTTPError as exc:
                log.warning("metrics scrape of %s failed: %s", url, exc)
            else:
                yield sampler.sample(resp.text, t)
            try:
                await asyncio.wait_for(stop.wait(), timeout=period)
            except asyncio.TimeoutError:
                pass
    finally:
        if own:
            await client.aclose()


def measure_init_latency(
    base_url: str,
    probe_period: float = 0.5,
    deadline: float = 600.0,
    start: float | None = None,
    routes: Sequence[str] = ("/health", "/v1/models"),
) -> float:
    """Seconds from ``start`` (a ``time.monotonic()`` value, default now) until the
    server first answers a readiness route with 2xx."""
    start = time.monotonic() if start is None else start
    base = base_url.rstrip("/")
    with httpx.Client(timeout=probe_period if probe_period > 0 else 1.0) as client:
        while True:
            for route in routes:
                try:
                    if client.get(base + route).is_success:
                        return time.monotonic() - start
                except httpx.HTTPError:
                    pass
            elapsed = time.monotonic() - start
            if elapsed >= deadline:
                raise InitTimeout(f"{base_url} not ready after {elapsed:.1f}s")
            time.sleep(min(probe_period, max(deadline - elapsed, 0.0)))


# --- alignment and persistence --------------------------------------------------


def align_telemetry(
    samples: Sequence[EngineTelemetrySample], run_epoch: float
) -> list[tuple[float, EngineTelemetrySample]]:
    """Rebase wall timestamps to seconds since ``run_epoch``; order is preserved."""
    return [(s.t - run_epoch, s) for s in samples if s.t is not None]


def interleave(*streams: Iterable[tuple[float, object]]) -> list[tuple[float, object]]:
    """Merge already-sorted ``(offset, item)`` streams into one global timeline."""
    return list(heapq.merge(*streams, key=lambda pair: pair[0]))


def _cell(v: float | int | None) -> str:
    return "" if v is None else repr(v)


def write_telemetry_csv(path: str | Path, aligned: Iterable[tuple[float, EngineTelemetrySample]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for offset, s in aligned:
            w.writerow(
                [
                    repr(round(offset, 6)),
                    _cell(s.prompt_tps),
                    _cell(s.gen_tps),
                    _cell(s.running),
                    _cell(s.waiting),
                    _cell(s.kv_usage),
                    _cell(s.prefix_hit),
                ]
            )


def read_telemetry_csv(path: str | Path) -> list[tuple[float, EngineTelemetrySample]]:
    out = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.DictReader(f):
            num = lambda k, cast=float: cast(row[k]) if row[k] != "" else None  # noqa: E731
            offset = float(row["t_offset_s"])
            out.append(
                (
                    offset,
                    EngineTelemetrySample(
                        t=offset,
                        prompt_tps=num("prompt_tps"),
                        gen_tps=num("gen_tps"),
                        running=num("running", int),
                        waiting=num("waiting", int),
                        kv_usage=num("kv_usage"),
                        prefix_hit=num("prefix_hit"),
                    ),
                )
            )
    return out

