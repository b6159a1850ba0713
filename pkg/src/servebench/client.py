"""Streaming driver for OpenAI-compatible ``/v1/chat/completions`` endpoints.

Every SSE data chunk is timestamped on arrival against a shared run clock and
classified as reasoning or visible output.  Failed requests are data points:
they come back with ``finish_reason`` error/timeout instead of raising.
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Any, Sequence

import httpx

from .core import (
    FinishReason,
    RequestResult,
    TokenEvent,
    Visibility,
    compute_request_metrics,
    event_log_row,
    timing_from_events,
)
from .workload import ScheduledRequest, render_prompt

log = logging.getLogger(__name__)

API_KEY_ENV = "SERVEBENCH_API_KEY"
REASONING_FIELDS = ("reasoning_content", "reasoning")
OPEN_LOOP_DEFAULT_IN_FLIGHT = 256

_WIRE_FINISH = {"stop": FinishReason.STOP, "length": FinishReason.LENGTH_BUDGET}


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str
    model_name: str
    temperature: float = 0.6
    top_p: float = 0.95
    top_k: int | None = 20
    max_tokens: int = 4096
    timeout: float = 1200.0
    mode: str = "reasoning"
    max_in_flight: int | None = None
    think_open: str = "<think>"
    think_close: str = "</think>"
    think_start_inside: bool = False

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be positive")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be >= 1")
        if self.mode not in ("reasoning", "standard"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def for_mode(cls, base_url: str, model_name: str, mode: str = "reasoning", **overrides: Any):
        """Sampling defaults for reasoning vs standard models."""
        if mode == "reasoning":
            defaults = {"temperature": 0.6, "top_p": 0.95, "top_k": 20}
        else:
            defaults = {"temperature": 0.7, "top_p": 0.8, "top_k": 20}
        defaults.update(overrides)
        return cls(base_url=base_url, model_name=model_name, mode=mode, **defaults)

    def request_body(self, messages: Sequence[dict[str, str]]) -> dict[str, Any]:
        body: dict[str, Any] = {
            "model": self.model_name,
            "messages": list(messages),
            "temperature": self.temperature,
            "top_p": self.top_p,
            "max_tokens": self.max_tokens,
            "stream": True,
            "stream_options": {"include_usage": True},
        }
        if self.top_k is not None:
            body["top_k"] = self.top_k
        return body


class RunClock:
    """Monotonic nanoseconds since the run epoch."""

    def __init__(self) -> None:
        self.epoch_ns = time.monotonic_ns()
        self.epoch_wall = time.time()

    def now(self) -> int:
        return time.monotonic_ns() - self.epoch_ns


class ThinkSplitter:
    """Incremental splitter of inline ``<think>...</think>`` content.

    Marker text split across chunks is held back until it can be decided.
    """

    def __init__(self, open_marker: str = "<think>", close_marker: str = "</think>", inside: bool = False):
        self.open_marker = open_marker
        self.close_marker = close_marker
        self.inside = inside
        self._pending = ""

    def feed(self, text: str) -> tuple[str, str, bool]:
        """Returns (reasoning_text, visible_text, saw_marker) for this chunk."""
        buf = self._pending + text
        self._pending = ""
        reasoning: list[str] = []
        visible: list[str] = []
        saw_marker = False
        while buf:
            marker = self.close_marker if self.inside else self.open_marker
            idx = buf.find(marker)
            sink = reasoning if self.inside else visible
            if idx >= 0:
                sink.append(buf[:idx])
                buf = buf[idx + len(marker) :]
                self.inside = not self.inside
                saw_marker = True
                continue
            keep = 0
            for k in range(min(len(marker) - 1, len(buf)), 0, -1):
                if marker.startswith(buf[-k:]):
                    keep = k
                    break
            sink.append(buf[: len(buf) - keep])
            self._pending = buf[len(buf) - keep :]
            break
        return "".join(reasoning), "".join(visible), saw_marker

    def flush(self) -> tuple[str, str]:
        rest, self._pending = self._pending, ""
        return (rest, "") if self.inside else ("", rest)


class DeltaClassifier:
    """Per-request visibility state machine over streamed deltas."""

    def __init__(self, open_marker: str = "<think>", close_marker: str = "</think>", start_inside: bool = False):
        self.splitter = ThinkSplitter(open_marker, close_marker, start_inside)
        self.reasoning_parts: list[str] = []
        self.visible_parts: list[str] = []

    def classify(self, delta: dict[str, Any]) -> Visibility | None:
        """Visibility of one delta, or None when it carries no generated text."""
        for key in REASONING_FIELDS:
            text = delta.get(key)
            if isinstance(text, str) and text:
                self.reasoning_parts.append(text)
                return Visibility.REASONING
        content = delta.get("content")
        if not isinstance(content, str) or not content:
            return None
        reasoning, visible, _ = self.splitter.feed(content)
        self.reasoning_parts.append(reasoning)
        self.visible_parts.append(visible)
        # A chunk holding only a marker, or a held-back marker prefix, is think output.
        return Visibility.VISIBLE if visible else Visibility.REASONING

    def texts(self) -> tuple[str, str]:
        r, v = self.splitter.flush()
        return "".join(self.reasoning_parts) + r, "".join(self.visible_parts) + v


def classify_delta(delta: dict[str, Any], classifier: DeltaClassifier | None = None) -> Visibility | None:
    return (classifier or DeltaClassifier()).classify(delta)


@dataclass
class StreamOutcome:
    request_id: str
    t_send: int
    t_done: int = 0
    events: list[TokenEvent] = field(default_factory=list)
    reasoning_text: str = ""
    visible_text: str = ""
    finish_reason: FinishReason = FinishReason.ERROR
    usage_tokens: int | None = None
    error: str | None = None


def _headers() -> dict[str, str]:
    headers = {"Accept": "text/event-stream"}
    key = os.environ.get(API_KEY_ENV)
    if key:
        headers["Authorization"] = f"Bearer {key}"
    return headers


async def _consume_stream(
    client: httpx.AsyncClient,
    cfg: EndpointConfig,
    messages: Sequence[dict[str, str]],
    out: StreamOutcome,
    classifier: DeltaClassifier,
    clock: RunClock,
) -> None:
    url = cfg.base_url.rstrip("/") + "/v1/chat/completions"
    wire_finish: str | None = None
    done = False
    async with client.stream("POST", url, json=cfg.request_body(messages), headers=_headers()) as resp:
        if resp.status_code != 200:
            body = (await resp.aread())[:200].decode(errors="replace")
            out.error = f"HTTP {resp.status_code}: {body}"
            return
        async for line in resp.aiter_lines():
            if not line.startswith("data:"):
                continue
            t = clock.now()
            payload = line[5:].strip()
            if payload == "[DONE]":
                done = True
                break
            chunk = json.loads(payload)
            usage = chunk.get("usage")
            if usage and usage.get("completion_tokens") is not None:
                out.usage_tokens = int(usage["completion_tokens"])
            for choice in chunk.get("choices") or ():
                vis = classifier.classify(choice.get("delta") or {})
                if vis is not None:
                    out.events.append(TokenEvent(out.request_id, t, vis, 1))
                if choice.get("finish_reason"):
                    wire_finish = choice["finish_reason"]
    if wire_finish is None:
        out.error = "stream ended without a finish_reason" if not done else "no finish_reason before [DONE]"
        return
    reason = _WIRE_FINISH.get(wire_finish)
    if reason is None:
        out.error = f"engine finish_reason {wire_finish!r}"
        return
    if reason is FinishReason.STOP and not out.events:
        out.error = "empty completion"
        return
    out.finish_reason = reason


async def send_streaming_request(
    client: httpx.AsyncClient,
    cfg: EndpointConfig,
    messages: Sequence[dict[str, str]],
    request_id: str,
    clock: RunClock,
) -> StreamOutcome:
    """Issue one streaming completion; never raises for transport or server faults."""
    classifier = DeltaClassifier(cfg.think_open, cfg.think_close, cfg.think_start_inside)
    out = StreamOutcome(request_id=request_id, t_send=clock.now())
    try:
        await asyncio.wait_for(_consume_stream(client, cfg, messages, out, classifier, clock), cfg.timeout)
    except asyncio.TimeoutError:
        out.finish_reason = FinishReason.TIMEOUT
        out.error = f"no completion within {cfg.timeout}s"
    except (httpx.HTTPError, json.JSONDecodeError, OSError) as exc:
        out.finish_reason = FinishReason.ERROR
        out.error = f"{type(exc).__name__}: {exc}"
    out.t_done = clock.now()
    out.reasoning_text, out.visible_text = classifier.texts()
    return out


@dataclass
class Collector:
    """Append-only sink for finished requests; tracks peak in-flight count."""

    results: list[RequestResult] = field(default_factory=list)
    event_rows: list[dict[str, Any]] = field(default_factory=list)
    in_flight: int = 0
    max_in_flight: int = 0

    def started(self) -> None:
        self.in_flight += 1
        self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def finished(self, result: RequestResult, row: dict[str, Any]) -> None:
        self.in_flight -= 1
        self.results.append(result)
        self.event_rows.append(row)


def build_result(
    out: StreamOutcome,
    sched: ScheduledRequest,
    run_id: str,
    token_budget: int,
    dispatch_lateness_ns: int | None = None,
) -> tuple[RequestResult, dict[str, Any]]:
    timing = timing_from_events(out.t_send, out.t_done, out.events)
    metrics = compute_request_metrics(out.events, timing, token_budget, out.finish_reason, out.usage_tokens)
    result = RequestResult(
        request_id=out.request_id,
        record_id=sched.record.id,
        run_id=run_id,
        timing=timing,
        metrics=metrics,
        raw_visible_text=out.visible_text,
        raw_reasoning_text=out.reasoning_text,
        error=out.error,
    )
    row = event_log_row(
        out.request_id, timing, out.events, token_budget, out.finish_reason, out.usage_tokens, dispatch_lateness_ns
    )
    return result, row


def make_client(max_in_flight: int | None = None) -> httpx.AsyncClient:
    limits = httpx.Limits(max_connections=max_in_flight, max_keepalive_connections=max_in_flight)
    return httpx.AsyncClient(timeout=httpx.Timeout(None, connect=30.0), limits=limits)


async def _dispatch(
    client: httpx.AsyncClient,
    cfg: EndpointConfig,
    sched: ScheduledRequest,
    clock: RunClock,
    run_id: str,
    collector: Collector,
    planned_ns: int | None = None,
) -> RequestResult:
    collector.started()
    out = await send_streaming_request(
        client, cfg, render_prompt(sched.record, cfg.mode), sched.request_id, clock
    )
    lateness = None if planned_ns is None else out.t_send - planned_ns
    result, row = build_result(out, sched, run_id, cfg.max_tokens, lateness)
    collector.finished(result, row)
    return result


async def run_closed_batch(
    cfg: EndpointConfig,
    batch: Sequence[ScheduledRequest],
    clock: RunClock,
    run_id: str,
    client: httpx.AsyncClient | None = None,
    collector: Collector | None = None,
) -> list[RequestResult]:
    """Dispatch every request of ``batch`` at once; return when all have finished."""
    collector = collector if collector is not None else Collector()
    own = client is None
    client = client or make_client(cfg.max_in_flight)
    sem = asyncio.Semaphore(cfg.max_in_flight) if cfg.max_in_flight else None

    async def one(sched: ScheduledRequest) -> RequestResult:
        if sem is None:
            return await _dispatch(client, cfg, sched, clock, run_id, collector)
        async with sem:
            return await _dispatch(client, cfg, sched, clock, run_id, collector)

    try:
        return list(await asyncio.gather(*(one(s) for s in batch)))
    finally:
        if own:
            await client.aclose()


async def run_open_loop(
    cfg: EndpointConfig,
    schedule: Sequence[ScheduledRequest],
    clock: RunClock,
    run_id: str,
    client: httpx.AsyncClient | None = None,
    collector: Collector | None = None,
) -> list[RequestResult]:
    """Dispatch request i at ``epoch + send_offset(i)`` regardless of earlier completions."""
    if not schedule:
        return []
    collector = collector if collector is not None else Collector()
    limit = cfg.max_in_flight or OPEN_LOOP_DEFAULT_IN_FLIGHT
    own = client is None
    client = client or make_client(limit)
    sem = asyncio.Semaphore(limit)

    async def one(sched: ScheduledRequest) -> RequestResult:
        if sched.send_offset is None:
            raise ValueError(f"{sched.request_id} has no send_offset")
        planned = round(sched.send_offset * 1e9)
        delay = (planned - clock.now()) / 1e9
        if delay > 0:
            await asyncio.sleep(delay)
        async with sem:
            return await _dispatch(client, cfg, sched, clock, run_id, collector, planned)

    try:
        return list(await asyncio.gather(*(one(s) for s in schedule)))
    finally:
        if own:
            await client.aclose()
