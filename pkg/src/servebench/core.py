"""Domain types and per-request / per-run metric computation.

All timestamps are integer nanoseconds on one monotonic clock whose zero is
the run epoch; reported latencies are float seconds.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterable, Sequence

NS = 1_000_000_000


class TaskKind(str, Enum):
    GSM8K = "gsm8k"
    MATH500 = "math500"
    AIME = "aime"
    GPQA = "gpqa"


class Visibility(str, Enum):
    REASONING = "reasoning"
    VISIBLE = "visible"


class FinishReason(str, Enum):
    STOP = "stop"
    LENGTH_BUDGET = "length_budget"
    TIMEOUT = "timeout"
    ERROR = "error"


class MetricsError(ValueError):
    """An event log or timing record breaks the measurement contract."""


@dataclass(frozen=True)
class DatasetRecord:
    id: str
    prompt: str
    gold_answer: str
    task_kind: TaskKind
    difficulty_tag: int | None = None
    choices: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "task_kind", TaskKind(self.task_kind))
        if self.choices is not None:
            object.__setattr__(self, "choices", tuple(self.choices))
        if self.task_kind is TaskKind.GPQA:
            if self.choices is None or len(self.choices) != 4:
                raise ValueError(f"record {self.id}: gpqa needs exactly 4 choices")
            if self.gold_answer not in ("A", "B", "C", "D"):
                raise ValueError(f"record {self.id}: gpqa gold must be a letter A-D")
        elif self.task_kind is TaskKind.AIME:
            try:
                gold = int(self.gold_answer)
            except ValueError:
                raise ValueError(f"record {self.id}: aime gold must be an integer") from None
            if not 0 <= gold <= 999:
                raise ValueError(f"record {self.id}: aime gold {gold} outside [0, 999]")


@dataclass(frozen=True)
class TokenEvent:
    request_id: str
    t: int
    visibility: Visibility
    token_count: int = 1

    def __post_init__(self) -> None:
        if type(self.visibility) is not Visibility:
            object.__setattr__(self, "visibility", Visibility(self.visibility))
        if self.token_count < 1:
            raise MetricsError("token_count must be >= 1")


@dataclass(frozen=True)
class RequestTiming:
    t_send: int
    t_done: int
    t_first_token: int | None = None
    t_first_visible: int | None = None
    t_last_token: int | None = None


@dataclass(frozen=True)
class RequestMetrics:
    ttft: float
    ttfvt: float
    tbt: float | None
    e2e: float
    output_tokens: int
    reasoning_tokens: int
    visible_tokens: int
    finish_reason: FinishReason

    def __post_init__(self) -> None:
        object.__setattr__(self, "finish_reason", FinishReason(self.finish_reason))


@dataclass(frozen=True)
class RequestResult:
    request_id: str
    record_id: str
    run_id: str
    timing: RequestTiming
    metrics: RequestMetrics
    raw_visible_text: str = ""
    raw_reasoning_text: str = ""
    extracted_answer: str | None = None
    correct: bool | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["metrics"]["finish_reason"] = self.metrics.finish_reason.value
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RequestResult":
        return cls(
            request_id=d["request_id"],
            record_id=d["record_id"],
            run_id=d["run_id"],
            timing=RequestTiming(**d["timing"]),
            metrics=RequestMetrics(**d["metrics"]),
            raw_visible_text=d.get("raw_visible_text", ""),
            raw_reasoning_text=d.get("raw_reasoning_text", ""),
            extracted_answer=d.get("extracted_answer"),
            correct=d.get("correct"),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class SummaryReport:
    accuracy: float | None
    running_time: float
    tps: float
    rps: float
    total_output_tokens: int
    request_count: int
    completed_count: int
    graded_count: int
    correct_count: int
    ttft: dict[str, float] | None
    ttfvt: dict[str, float] | None
    tbt: dict[str, float] | None
    e2e: dict[str, float] | None
    finish_reasons: dict[str, int] = field(default_factory=dict)
    init_latency: float | None = None

    @property
    def accuracy_pct(self) -> float | None:
        """Accuracy in the two-decimal percent convention used in result tables."""
        return None if self.accuracy is None else round(self.accuracy * 100, 2)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["accuracy_pct"] = self.accuracy_pct
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SummaryReport":
        d = {k: v for k, v in d.items() if k != "accuracy_pct"}
        return cls(**d)


def timing_from_events(t_send: int, t_done: int, events: Sequence[TokenEvent]) -> RequestTiming:
    first_visible = next((e.t for e in events if e.visibility is Visibility.VISIBLE), None)
    return RequestTiming(
        t_send=t_send,
        t_done=t_done,
        t_first_token=events[0].t if events else None,
        t_first_visible=first_visible,
        t_last_token=events[-1].t if events else None,
    )


def compute_request_metrics(
    events: Sequence[TokenEvent],
    timing: RequestTiming,
    token_budget: int,
    finish_reason: FinishReason | str = FinishReason.STOP,
    usage_tokens: int | None = None,
) -> RequestMetrics:
    """Per-request latencies and token counts from the chunk event log.

    TBT is the mean gap between consecutive chunks, each chunk counted once
    regardless of how many tokens it carried.  When no visible token arrived,
    TTFVT collapses to E2E.  ``usage_tokens`` (server-reported completion
    tokens) rescales the reasoning/visible split to the server's total.
    """
    finish_reason = FinishReason(finish_reason)
    if not events and finish_reason is FinishReason.STOP:
        raise MetricsError("finish_reason=stop with an empty event log")
    if token_budget < 1:
        raise MetricsError("token_budget must be >= 1")
    prev = timing.t_send
    request_ids = set()
    for e in events:
        if e.t < prev:
            raise MetricsError(f"event timestamps out of order at t={e.t}")
        prev = e.t
        request_ids.add(e.request_id)
    if len(request_ids) > 1:
        raise MetricsError("events span more than one request")
    if timing.t_done < prev:
        raise MetricsError("t_done precedes the last token event")

    e2e_ns = timing.t_done - timing.t_send
    if events:
        ttft_ns = events[0].t - timing.t_send
    else:
        ttft_ns = e2e_ns
    first_visible = next((e.t for e in events if e.visibility is Visibility.VISIBLE), None)
    ttfvt_ns = e2e_ns if first_visible is None else first_visible - timing.t_send

    tbt = None
    if len(events) >= 2:
        gaps = sum(b.t - a.t for a, b in zip(events, events[1:]))
        tbt = gaps / (len(events) - 1) / NS

    reasoning = sum(e.token_count for e in events if e.visibility is Visibility.REASONING)
    visible = sum(e.token_count for e in events if e.visibility is Visibility.VISIBLE)
    observed = reasoning + visible
    if usage_tokens is not None and observed > 0 and usage_tokens != observed:
        # Round-half-up share of the server total, integer arithmetic only.
        reasoning = (2 * reasoning * usage_tokens + observed) // (2 * observed)
        visible = usage_tokens - reasoning

    return RequestMetrics(
        ttft=ttft_ns / NS,
        ttfvt=ttfvt_ns / NS,
        tbt=tbt,
        e2e=e2e_ns / NS,
        output_tokens=reasoning + visible,
        reasoning_tokens=reasoning,
        visible_tokens=visible,
        finish_reason=finish_reason,
    )


def percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: element ``ceil(q*n) - 1`` of the ascending sort."""
    if not values:
        raise ValueError("percentile of an empty list")
    if not 0 < q <= 1:
        raise ValueError("q must lie in (0, 1]")
    ordered = sorted(values)
    # round() absorbs products like 0.07 * 100 == 7.000000000000001
    rank = math.ceil(round(q * len(ordered), 9))
    return ordered[max(rank, 1) - 1]


def percentile_table(values: Sequence[float]) -> dict[str, float] | None:
    if not values:
        return None
    return {
        "p50": percentile(values, 0.50),
        "p90": percentile(values, 0.90),
        "p99": percentile(values, 0.99),
        "mean": math.fsum(values) / len(values),
    }


_COMPLETED = (FinishReason.STOP, FinishReason.LENGTH_BUDGET)


def aggregate(
    results: Iterable[RequestResult],
    window: float,
    init_latency: float | None = None,
) -> SummaryReport:
    """Run-level ASU summary over ``window`` wall seconds.

    Errored requests count toward totals but not latency percentiles.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")

    latency_pool = [r.metrics for r in results if r.metrics.finish_reason is not FinishReason.ERROR]
    total_tokens = sum(r.metrics.output_tokens for r in results)
    completed = sum(1 for r in results if r.metrics.finish_reason in _COMPLETED)
    graded = [r for r in results if r.correct is not None]
    correct = sum(1 for r in graded if r.correct)
    reasons = Counter(r.metrics.finish_reason.value for r in results)

    return SummaryReport(
        accuracy=correct / len(graded) if graded else None,
        running_time=window,
        tps=total_tokens / window,
        rps=completed / window,
        total_output_tokens=total_tokens,
        request_count=len(results),
        completed_count=completed,
        graded_count=len(graded),
        correct_count=correct,
        ttft=percentile_table([m.ttft for m in latency_pool]),
        ttfvt=percentile_table([m.ttfvt for m in latency_pool]),
        tbt=percentile_table([m.tbt for m in latency_pool if m.tbt is not None]),
        e2e=percentile_table([m.e2e for m in latency_pool]),
        finish_reasons={k: reasons[k] for k in sorted(reasons)},
        init_latency=init_latency,
    )


# --- persistence -----------------------------------------------------------


def write_jsonl(path: Path, rows: Iterable[dict[str, Any]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, sort_keys=True, ensure_ascii=False))
            f.write("\n")


def read_jsonl(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: {exc.msg}") from None
    return rows


def write_json(path: Path, obj: Any) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True, ensure_ascii=False)
        f.write("\n")


def event_log_row(
    request_id: str,
    timing: RequestTiming,
    events: Sequence[TokenEvent],
    token_budget: int,
    finish_reason: FinishReason,
    usage_tokens: int | None = None,
    dispatch_lateness_ns: int | None = None,
) -> dict[str, Any]:
    """One events.jsonl row: enough to recompute RequestMetrics exactly."""
    return {
        "request_id": request_id,
        "t_send": timing.t_send,
        "t_done": timing.t_done,
        "token_budget": token_budget,
        "finish_reason": FinishReason(finish_reason).value,
        "usage_tokens": usage_tokens,
        "dispatch_lateness_ns": dispatch_lateness_ns,
        "events": [[e.t, e.visibility.value, e.token_count] for e in events],
    }


def metrics_from_event_row(row: dict[str, Any]) -> RequestMetrics:
    events = [TokenEvent(row["request_id"], t, vis, n) for t, vis, n in row["events"]]
    timing = timing_from_events(row["t_send"], row["t_done"], events)
    return compute_request_metrics(
        events, timing, row["token_budget"], row["finish_reason"], row.get("usage_tokens")
    )
