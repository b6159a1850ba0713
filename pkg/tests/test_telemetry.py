from __future__ import annotations

import asyncio
import calendar
import time

import pytest
from hypothesis import given
from hypothesis import strategies as st

from servebench.simengine import SimConfig
from servebench.simengine.server import serve_in_thread
from servebench.telemetry import (
    CSV_HEADER,
    SGLANG_LABELS,
    EngineTelemetrySample,
    InitTimeout,
    MetricsSampler,
    TelemetryParseError,
    align_telemetry,
    interleave,
    measure_init_latency,
    parse_engine_log,
    parse_engine_log_line,
    parse_exposition,
    poll_metrics_endpoint,
    read_telemetry_csv,
    tail_log_file,
    write_telemetry_csv,
)

FIRST = (
    "Avg prompt throughput: 223.0 tokens/s, Avg generation throughput: 164.5 tokens/s, Running: 16 reqs, "
    "Waiting: 0 reqs, GPU KV cache usage: 1.0%, Prefix cache hit rate: 11.6%"
)


def test_first_trace_line():
    s = parse_engine_log_line(FIRST)
    assert (s.prompt_tps, s.gen_tps, s.running, s.waiting, s.kv_usage, s.prefix_hit) == (223.0, 164.5, 16, 0, 0.010, 0.116)


def test_full_trace(data_dir):
    samples = parse_engine_log((data_dir / "engine_stats_trace.log").read_text().splitlines(), year=2025)
    assert [s.kv_usage for s in samples] == [0.010, 0.028, 0.039, 0.040, 0.051, 0.049, 0.049, 0.045, 0.050, 0.057]
    assert [s.running for s in samples] == [16, 14, 11, 8, 8, 6, 5, 4, 4, 4]
    assert samples[0].t == calendar.timegm((2025, 5, 10, 13, 1, 49, 0, 0, 0))
    assert [b.t - a.t for a, b in zip(samples, samples[1:])] == [10.0] * 9


def test_non_stats_line_is_absent():
    assert parse_engine_log_line("INFO: 127.0.0.1:53458 - POST /v1/chat/completions 200 OK") is None


def test_bad_number_names_the_field():
    with pytest.raises(TelemetryParseError, match="running"):
        parse_engine_log_line(FIRST.replace("Running: 16", "Running: x16"))


@given(st.text(max_size=200))
def test_arbitrary_text_never_errors(text):
    if "Avg prompt throughput" not in text:
        assert parse_engine_log_line(text) is None


def test_sample_validation():
    with pytest.raises(ValueError):
        EngineTelemetrySample(t=0, kv_usage=1.5)
    with pytest.raises(ValueError):
        EngineTelemetrySample(t=0, running=-1)


# --- exposition --------------------------------------------------------------------------

EXPOSITION = """\
# HELP vllm:gpu_cache_usage_perc GPU KV-cache usage.
# TYPE vllm:gpu_cache_usage_perc gauge
vllm:gpu_cache_usage_perc{model_name="m"} 0.42
vllm:num_requests_running{model_name="m"} 7
vllm:num_requests_waiting{model_name="m"} 2
vllm:generation_tokens_total{model_name="m"} 1000
"""


def test_gauge_read_directly():
    s = MetricsSampler().sample(EXPOSITION, t=0.0)
    assert (s.kv_usage, s.running, s.waiting) == (0.42, 7, 2)
    assert s.gen_tps is None and s.prefix_hit is None


def test_counters_become_rates():
    sampler = MetricsSampler()
    sampler.sample(EXPOSITION, t=10.0)
    later = EXPOSITION.replace("} 1000", "} 1500")
    assert sampler.sample(later, t=12.0).gen_tps == 250.0


def test_malformed_line_drops_only_its_family():
    text = EXPOSITION.replace('vllm:num_requests_running{model_name="m"} 7', 'vllm:num_requests_running{model_name="m} 7')
    fam = parse_exposition(text)
    assert "vllm:num_requests_running" not in fam
    assert fam["vllm:gpu_cache_usage_perc"] == [({"model_name": "m"}, 0.42)]
    assert fam["vllm:num_requests_waiting"][0][1] == 2.0


def test_sglang_label_map():
    text = "sglang:token_usage 0.3\nsglang:num_running_reqs 5\nsglang:num_queue_reqs 1\nsglang:gen_throughput 88.5\n"
    s = MetricsSampler(SGLANG_LABELS).sample(text, t=1.0)
    assert (s.kv_usage, s.running, s.waiting, s.gen_tps) == (0.3, 5, 1, 88.5)


def test_poll_against_sim_spaces_samples_by_period():
    async def collect(url):
        stop = asyncio.Event()
        out = []
        async for s in poll_metrics_endpoint(url + "/metrics", period=0.3, stop=stop):
            out.append(s)
            if len(out) == 2:
                stop.set()
        return out

    with serve_in_thread(SimConfig()) as server:
        samples = asyncio.run(collect(server.url))
    assert len(samples) == 2
    assert samples[1].t - samples[0].t == pytest.approx(0.3, abs=0.1)
    assert samples[0].running == 0 and samples[0].kv_usage == 0.0


def test_poll_unreachable_keeps_going():
    async def run():
        stop = asyncio.Event()
        loop = asyncio.get_running_loop()
        loop.call_later(0.35, stop.set)
        return [s async for s in poll_metrics_endpoint("http://127.0.0.1:9/metrics", period=0.1, stop=stop)]

    assert asyncio.run(run()) == []


def test_tail_log_file(tmp_path, data_dir):
    log = tmp_path / "engine.log"
    lines = (data_dir / "engine_stats_trace.log").read_text().splitlines()

    async def run():
        stop = asyncio.Event()
        got = []

        async def writer():
            for line in lines[:3]:
                with open(log, "a") as f:
                    f.write("INFO unrelated line\n" + line + "\n")
                await asyncio.sleep(0.05)
            await asyncio.sleep(0.1)
            stop.set()

        async def reader():
            async for s in tail_log_file(log, period=0.02, stop=stop, year=2025):
                got.append(s)

        await asyncio.gather(writer(), reader())
        return got

    got = asyncio.run(run())
    assert [s.running for s in got] == [16, 14, 11]


# --- init latency ------------------------------------------------------------------------


def test_init_latency_with_warmup():
    with serve_in_thread(SimConfig(warmup=2.0)) as server:
        start = time.monotonic()
        latency = measure_init_latency(server.url, probe_period=0.1, deadline=10, start=start)
    assert 2.0 <= latency <= 2.0 + 0.1 + 0.05


def test_init_latency_already_up():
    with serve_in_thread(SimConfig()) as server:
        assert measure_init_latency(server.url, probe_period=0.2, deadline=5) <= 0.2


def test_init_latency_deadline():
    start = time.monotonic()
    with pytest.raises(InitTimeout):
        measure_init_latency("http://127.0.0.1:9", probe_period=0.25, deadline=1.0)
    assert time.monotonic() - start == pytest.approx(1.0, abs=0.3)


# --- alignment and CSV ---------------------------------------------------------------------


def test_align_and_shift():
    samples = [EngineTelemetrySample(t=100.0 + i, running=i) for i in range(4)]
    aligned = align_telemetry(samples, run_epoch=100.0)
    assert aligned[0][0] == 0.0
    shifted = align_telemetry(samples, run_epoch=97.5)
    assert [b[0] - a[0] for a, b in zip(aligned, shifted)] == [2.5] * 4


def test_interleave_matches_merge_oracle():
    a = [(0.0, "t0"), (1.0, "t1"), (2.0, "t2")]
    b = [(0.5, "r0"), (1.5, "r1"), (2.5, "r2")]
    merged = interleave(a, b)
    assert merged == sorted(a + b, key=lambda p: p[0])


def test_csv_roundtrip(tmp_path):
    samples = [
        (0.0, EngineTelemetrySample(t=0.0, prompt_tps=1.5, gen_tps=None, running=3, waiting=0, kv_usage=0.25, prefix_hit=None)),
        (1.0, EngineTelemetrySample(t=1.0, prompt_tps=0.0, gen_tps=20.0, running=2, waiting=1, kv_usage=0.5, prefix_hit=0.1)),
    ]
    path = tmp_path / "t.csv"
    write_telemetry_csv(path, samples)
    assert path.read_text().splitlines()[0] == ",".join(CSV_HEADER)
    assert CSV_HEADER == ("t_offset_s", "prompt_tps", "gen_tps", "running", "waiting", "kv_usage", "prefix_hit")
    back = read_telemetry_csv(path)
    assert [(o, s.running, s.kv_usage, s.gen_tps) for o, s in back] == [(0.0, 3, 0.25, None), (1.0, 2, 0.5, 20.0)]
