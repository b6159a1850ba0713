from __future__ import annotations

import math
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from servebench.core import (
    NS,
    FinishReason,
    MetricsError,
    RequestMetrics,
    RequestResult,
    RequestTiming,
    SummaryReport,
    TokenEvent,
    Visibility,
    aggregate,
    compute_request_metrics,
    event_log_row,
    metrics_from_event_row,
    percentile,
    percentile_table,
    read_jsonl,
    timing_from_events,
    write_jsonl,
)

R, V = Visibility.REASONING, Visibility.VISIBLE


def ev(t_s: float, vis: Visibility = V, n: int = 1, rid: str = "r") -> TokenEvent:
    return TokenEvent(rid, round(t_s * NS), vis, n)


def metrics_for(events, t_done_s=None, **kw):
    t_done = events[-1].t if t_done_s is None else round(t_done_s * NS)
    timing = timing_from_events(0, t_done, events)
    return compute_request_metrics(events, timing, kw.pop("budget", 4096), **kw)


def result(rid: str, e2e: float, tokens: int = 10, correct=None, reason=FinishReason.STOP) -> RequestResult:
    m = RequestMetrics(
        ttft=e2e / 2, ttfvt=e2e / 2, tbt=0.01, e2e=e2e, output_tokens=tokens,
        reasoning_tokens=0, visible_tokens=tokens, finish_reason=reason,
    )
    timing = RequestTiming(0, round(e2e * NS), 0, 0, round(e2e * NS))
    return RequestResult(rid, rid, "run", timing, m, correct=correct)


# --- per-request metrics ---------------------------------------------------------


def test_single_visible_chunk():
    m = metrics_for([ev(1.0)])
    assert (m.ttft, m.ttfvt, m.e2e, m.tbt) == (1.0, 1.0, 1.0, None)


def test_three_chunk_example():
    m = metrics_for([ev(1.0, R), ev(1.5, R), ev(2.5, V)])
    assert m.ttft == 1.0 and m.ttfvt == 2.5 and m.tbt == 0.75 and m.e2e == 2.5
    assert (m.reasoning_tokens, m.visible_tokens, m.output_tokens) == (2, 1, 3)


def test_tbt_telescopes_over_100_chunks():
    rng = random.Random(7)
    times = sorted(rng.randrange(1, 10**12) for _ in range(100))
    events = [TokenEvent("r", t, V) for t in times]
    m = compute_request_metrics(events, timing_from_events(0, times[-1], events), 4096)
    brute = sum(b - a for a, b in zip(times, times[1:])) / 99
    assert m.tbt * NS == pytest.approx(brute, abs=1e-3)
    assert abs(m.tbt * NS * 99 - (times[-1] - times[0])) <= 1


def test_chunk_counted_once_regardless_of_size():
    m = metrics_for([ev(1.0, V, 5), ev(2.0, V, 1)])
    assert m.tbt == 1.0 and m.output_tokens == 6


def test_ttfvt_falls_back_to_e2e_without_visible_tokens():
    m = metrics_for([ev(1.0, R), ev(2.0, R)], t_done_s=3.0, finish_reason=FinishReason.LENGTH_BUDGET)
    assert m.ttfvt == m.e2e == 3.0
    assert m.finish_reason is FinishReason.LENGTH_BUDGET


def test_empty_stop_is_a_contract_violation():
    with pytest.raises(MetricsError):
        compute_request_metrics([], RequestTiming(0, 10), 10, FinishReason.STOP)


def test_empty_timeout_is_allowed():
    m = compute_request_metrics([], RequestTiming(0, 5 * NS), 10, FinishReason.TIMEOUT)
    assert m.ttft == m.ttfvt == m.e2e == 5.0 and m.output_tokens == 0


def test_unordered_events_rejected():
    with pytest.raises(MetricsError):
        metrics_for([ev(2.0), ev(1.0)], t_done_s=3.0)


def test_mixed_request_ids_rejected():
    with pytest.raises(MetricsError):
        metrics_for([ev(1.0, rid="a"), ev(2.0, rid="b")])


def test_usage_rescale_preserves_split():
    m = metrics_for([ev(1.0, R), ev(2.0, V)], usage_tokens=10)
    assert (m.reasoning_tokens, m.visible_tokens) == (5, 5)
    m = metrics_for([ev(1.0, R), ev(1.5, R), ev(2.0, V)], usage_tokens=10)
    assert (m.reasoning_tokens, m.visible_tokens) == (7, 3)


def test_event_row_roundtrip_is_exact():
    events = [ev(0.3, R, 2), ev(0.7, R), ev(1.1, V, 3)]
    timing = timing_from_events(0, round(1.2 * NS), events)
    m = compute_request_metrics(events, timing, 64, FinishReason.STOP, 7)
    row = event_log_row("r", timing, events, 64, FinishReason.STOP, 7)
    assert metrics_from_event_row(row) == m


@settings(max_examples=200, deadline=None)
@given(
    gaps=st.lists(st.integers(min_value=0, max_value=10**11), min_size=2, max_size=60),
    vis=st.lists(st.sampled_from([R, V]), min_size=60, max_size=60),
)
def test_latency_ordering_and_telescoping(gaps, vis):
    t, events = 0, []
    for i, g in enumerate(gaps):
        t += g
        events.append(TokenEvent("r", t, vis[i]))
    timing = timing_from_events(0, t + 5, events)
    m = compute_request_metrics(events, timing, 4096)
    if m.visible_tokens:
        assert m.ttft <= m.ttfvt <= m.e2e
    assert abs(m.tbt * (len(events) - 1) * NS - (events[-1].t - events[0].t)) <= 1


# --- percentiles and aggregation -------------------------------------------------------


@pytest.mark.parametrize(
    "values,q,expected",
    [([5.0], 0.5, 5.0), ([1, 2, 3, 4], 0.5, 2), ([1, 2, 3, 4], 0.99, 4), ([1, 2, 3, 4], 0.25, 1)],
)
def test_percentile_examples(values, q, expected):
    assert percentile(values, q) == expected


def test_percentile_errors():
    with pytest.raises(ValueError):
        percentile([], 0.5)
    with pytest.raises(ValueError):
        percentile([1.0], 0.0)


def _nearest_rank_oracle(values, q):
    # Integer arithmetic: the smallest rank r with r/n >= q, with q as an exact fraction.
    from fractions import Fraction

    n = len(values)
    qf = Fraction(str(q))
    r = next(r for r in range(1, n + 1) if Fraction(r, n) >= qf)
    return sorted(values)[r - 1]


def test_percentile_table_matches_sort_and_index_oracle():
    latencies = [0.91, 0.12, 3.4, 0.55, 0.56, 2.2, 0.13, 0.98, 1.7, 0.44, 0.61, 5.9, 0.33, 0.72, 1.05, 0.29]
    table = percentile_table(latencies)
    for key, q in (("p50", 0.5), ("p90", 0.9), ("p99", 0.99)):
        assert table[key] == _nearest_rank_oracle(latencies, q)
    assert table == {"p50": 0.61, "p90": 3.4, "p99": 5.9, "mean": pytest.approx(sum(latencies) / 16)}


@given(st.lists(st.floats(0, 1e6, allow_nan=False), min_size=1, max_size=200), st.sampled_from([0.01, 0.07, 0.5, 0.9, 0.99, 1.0]))
def test_percentile_property(values, q):
    assert percentile(values, q) == _nearest_rank_oracle(values, q)


def test_aggregate_tps_rps():
    rep = aggregate([result("a", 1.0, 50), result("b", 2.0, 50)], window=10.0)
    assert rep.tps == 10.0 and rep.rps == 0.2 and rep.total_output_tokens == 100


def test_aggregate_accuracy_reporting_convention():
    results = [result(f"r{i}", 1.0, correct=i < 242) for i in range(300)]
    rep = aggregate(results, window=100.0)
    assert rep.accuracy_pct == 80.67
    assert rep.graded_count == 300 and rep.correct_count == 242


def test_aggregate_excludes_errors_from_latency_only():
    rs = [result("a", 1.0), result("b", 100.0, tokens=0, reason=FinishReason.ERROR)]
    rep = aggregate(rs, 10.0)
    assert rep.e2e["p99"] == 1.0
    assert rep.request_count == 2 and rep.completed_count == 1
    assert rep.finish_reasons == {"error": 1, "stop": 1}


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([result("a", 1.0)], 0)
    with pytest.raises(ValueError):
        aggregate([], 1.0)


@given(st.permutations(list(range(12))))
def test_aggregate_permutation_invariant(order):
    base = [result(f"r{i}", 0.1 * (i + 1), tokens=i + 1, correct=i % 3 == 0) for i in range(12)]
    assert aggregate([base[i] for i in order], 5.0) == aggregate(base, 5.0)


def test_summary_roundtrip():
    rep = aggregate([result("a", 1.0, correct=True)], 2.0, init_latency=3.5)
    assert SummaryReport.from_dict(rep.to_dict()) == rep


def test_jsonl_roundtrip(tmp_path):
    rs = [result("a", 1.0, correct=True), result("b", 2.5)]
    write_jsonl(tmp_path / "r.jsonl", (r.to_dict() for r in rs))
    assert [RequestResult.from_dict(d) for d in read_jsonl(tmp_path / "r.jsonl")] == rs


def test_read_jsonl_names_bad_line(tmp_path):
    p = tmp_path / "bad.jsonl"
    p.write_text('{"a": 1}\n{oops\n')
    with pytest.raises(ValueError, match=":2"):
        read_jsonl(p)


def test_token_event_rejects_zero_tokens():
    with pytest.raises(MetricsError):
        TokenEvent("r", 0, V, 0)
    assert TokenEvent("r", 0, "visible").visibility is V
    assert math.isclose(metrics_for([ev(0.5)]).ttft, 0.5)
