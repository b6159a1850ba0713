"""Deterministic discrete-event model of a continuous-batching, paged-KV engine.

Time is integer nanoseconds of simulated time.  One iteration advances the
clock by ``running_count / decode_rate`` seconds; every running request
either converts prompt tokens (prefill) or emits decode tokens.  KV blocks are
allocated as sequences grow and returned only when a request finishes, times
out, or is swapped out under memory pressure.
"""

from __future__ import annotations

import calendar
import hashlib
import json
import math
import time
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from typing import Any, Iterable, Sequence

from ..core import (
    NS,
    FinishReason,
    RequestResult,
    TokenEvent,
    Visibility,
    compute_request_metrics,
    event_log_row,
    timing_from_events,
)
from ..prng import CounterRNG
from ..telemetry import EngineTelemetrySample, parse_engine_log_line
from ..workload import ScheduledRequest, group_batches, render_prompt

# Simulated wall clock used to stamp telemetry lines (UTC).
SIM_EPOCH_YEAR = 2025
SIM_EPOCH = float(calendar.timegm((SIM_EPOCH_YEAR, 1, 1, 0, 0, 0, 0, 0, 0)))
CHARS_PER_TOKEN = 4
PLACEHOLDER_ANSWER = "\\boxed{0}"
PROMPT_OVERHEAD_TOKENS = 8


class InvariantViolation(AssertionError):
    """The engine's block or request accounting is inconsistent."""


class Phase(str, Enum):
    WAITING = "waiting"
    PREFILL = "prefill"
    DECODE = "decode"
    DONE = "done"


@dataclass(frozen=True)
class LengthModel:
    family: str = "lognormal"
    mu: float = math.log(400)
    sigma: float = 1.0
    value: int = 128
    difficulty_scale: float = 1.0

    def __post_init__(self) -> None:
        if self.family not in ("lognormal", "fixed"):
            raise ValueError(f"unknown length family {self.family!r}")
        if self.sigma < 0 or self.difficulty_scale <= 0 or self.value < 1:
            raise ValueError("invalid length model parameters")


@dataclass(frozen=True)
class PrefixCacheConfig:
    enabled: bool = False
    shared_prefix_tokens: int = 0


@dataclass(frozen=True)
class SpecDecodeConfig:
    enabled: bool = False
    draft_len: int = 4
    accept_prob: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.accept_prob <= 1.0:
            raise ValueError("accept_prob must lie in [0, 1]")
        if self.draft_len < 0:
            raise ValueError("draft_len must be >= 0")


@dataclass(frozen=True)
class SimConfig:
    kv_blocks_total: int = 4096
    block_size: int = 16
    max_running: int = 256
    prefill_rate: float = 50_000.0
    decode_rate: float = 2_000.0
    length_model: LengthModel = field(default_factory=LengthModel)
    reasoning_fraction: float = 0.8
    token_budget: int = 8192
    prefix_cache: PrefixCacheConfig = field(default_factory=PrefixCacheConfig)
    spec_decode: SpecDecodeConfig = field(default_factory=SpecDecodeConfig)
    warmup: float = 0.0
    seed: int = 0
    prompt_tokens: int | None = None
    request_timeout: float = 1200.0
    time_compression: float = 1.0
    reasoning_style: str = "field"
    label: str = ""

    def __post_init__(self) -> None:
        if self.kv_blocks_total < 1 or self.block_size < 1 or self.max_running < 1:
            raise ValueError("kv_blocks_total, block_size and max_running must be >= 1")
        if not 0.0 <= self.reasoning_fraction <= 1.0:
            raise ValueError("reasoning_fraction must lie in [0, 1]")
        if self.prefill_rate <= 0 or self.decode_rate <= 0:
            raise ValueError("prefill_rate and decode_rate must be positive")
        if self.token_budget < 1:
            raise ValueError("token_budget must be >= 1")
        if self.time_compression <= 0 or self.request_timeout <= 0 or self.warmup < 0:
            raise ValueError("time_compression and request_timeout must be positive, warmup >= 0")
        if self.reasoning_style not in ("field", "tags"):
            raise ValueError("reasoning_style must be 'field' or 'tags'")

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "SimConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown sim config keys: {sorted(unknown)}")
        d = dict(d)
        if "length_model" in d:
            d["length_model"] = LengthModel(**d["length_model"])
        if "prefix_cache" in d:
            d["prefix_cache"] = PrefixCacheConfig(**d["prefix_cache"])
        if "spec_decode" in d:
            d["spec_decode"] = SpecDecodeConfig(**d["spec_decode"])
        return cls(**d)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def natural_output_length(
    model: LengthModel, difficulty_tag: int | None, seed: int, request_id: str
) -> int:
    """Uncapped output length before the token budget applies."""
    if model.family == "fixed":
        base = float(model.value)
    else:
        z = CounterRNG.substream(seed, f"sim/length/{request_id}").normal()
        base = math.exp(model.mu + model.sigma * z)
    tier = difficulty_tag or 0
    # The epsilon keeps exp(log(400)) == 400.00000000000006 from rounding up to 401.
    length = math.ceil(base - 1e-9) * model.difficulty_scale**tier
    return max(1, math.ceil(length - 1e-9))


def sample_output_length(
    model: LengthModel,
    difficulty_tag: int | None,
    seed: int,
    request_id: str,
    token_budget: int | None = None,
) -> int:
    """Target output tokens: lognormal (or fixed) base, scaled per difficulty tier, capped."""
    n = natural_output_length(model, difficulty_tag, seed, request_id)
    return n if token_budget is None else min(n, token_budget)


def blocks_for(tokens: int, block_size: int) -> int:
    return -(-tokens // block_size)


@dataclass(eq=False)
class SimRequestState:
    id: str
    prompt_tokens: int
    target_output_tokens: int
    natural_output_tokens: int
    reasoning_tokens_planned: int
    arrival: int = 0
    emitted_tokens: int = 0
    blocks_held: int = 0
    prefilled: int = 0
    prefill_needed: int = 0
    phase: Phase = Phase.WAITING
    shared_blocks: int = 0
    admitted_seq: int = -1
    preemptions: int = 0
    t_done: int | None = None
    finish_reason: FinishReason | None = None
    events: list[TokenEvent] = field(default_factory=list)

    def own_blocks_needed(self, extra_tokens: int, block_size: int) -> int:
        total = blocks_for(self.prompt_tokens + self.emitted_tokens + extra_tokens, block_size)
        return total - self.shared_blocks


@dataclass(frozen=True)
class Emission:
    request_id: str
    visibility: Visibility
    count: int


@dataclass
class StepResult:
    t_start: int
    t_end: int
    emissions: list[Emission]
    finished: list[SimRequestState]


def admit(
    waiting: Sequence[SimRequestState],
    running_count: int,
    free_blocks: int,
    max_running: int,
    block_size: int,
    shared_blocks: int = 0,
    shared_resident: bool = True,
) -> list[str]:
    """Ids admitted from the FIFO head while slots and prompt blocks last; no bypass."""
    admitted: list[str] = []
    for req in waiting:
        if running_count + len(admitted) >= max_running:
            break
        need = req.own_blocks_needed(0, block_size)
        if req.shared_blocks and not shared_resident:
            need += shared_blocks
        if need > free_blocks:
            break
        free_blocks -= need
        if req.shared_blocks:
            shared_resident = True
        admitted.append(req.id)
    return admitted


def format_stats_line(
    t: float,
    prompt_tps: float,
    gen_tps: float,
    running: int,
    waiting: int,
    kv_usage: float,
    prefix_hit: float,
) -> str:
    """A periodic stats line in the vLLM logger format (timestamp is UTC)."""
    tm = time.gmtime(t)
    return (
        f"INFO {tm.tm_mon:02d}-{tm.tm_mday:02d} {tm.tm_hour:02d}:{tm.tm_min:02d}:{tm.tm_sec:02d} "
        f"[sim_engine.py:1] Avg prompt throughput: {prompt_tps:.1f} tokens/s, "
        f"Avg generation throughput: {gen_tps:.1f} tokens/s, Running: {running} reqs, "
        f"Waiting: {waiting} reqs, GPU KV cache usage: {kv_usage * 100:.1f}%, "
        f"Prefix cache hit rate: {prefix_hit * 100:.1f}%"
    )


class Engine:
    """Single-threaded engine core shared by the offline runner and the wire server."""

    def __init__(self, config: SimConfig, check_invariants: bool = True):
        self.config = config
        self.check = check_invariants
        self.now = 0
        self.free_blocks = config.kv_blocks_total
        self.waiting: deque[SimRequestState] = deque()
        self.running: list[SimRequestState] = []
        self.requests: dict[str, SimRequestState] = {}
        self.submitted = 0
        self.completed = 0
        self.timed_out = 0
        self.aborted = 0
        self.done = 0
        self.iterations = 0
        self.invariant_checks = 0
        self.peak_used_blocks = 0
        self.blocks_allocated_total = 0
        self._admit_counter = 0
        self._spec_rngs: dict[str, CounterRNG] = {}
        self.shared_blocks = (
            config.prefix_cache.shared_prefix_tokens // config.block_size
            if config.prefix_cache.enabled
            else 0
        )
        self.shared_resident = False
        # telemetry accumulators
        self.prompt_tokens_total = 0
        self.generation_tokens_total = 0
        self.prefix_hit_tokens = 0
        self.prefix_query_tokens = 0
        self._interval_prompt = 0
        self._interval_gen = 0
        self._last_sample_s = 0
        self.log_lines: list[str] = []
        self.telemetry: list[EngineTelemetrySample] = []

    # --- request lifecycle ---------------------------------------------------

    def new_request(
        self,
        request_id: str,
        prompt_tokens: int,
        difficulty_tag: int | None = None,
        budget: int | None = None,
        length_key: str | None = None,
    ) -> SimRequestState:
        """State for a new request; its length is drawn from ``length_key`` (default: the id)."""
        cfg = self.config
        budget = cfg.token_budget if budget is None else min(budget, cfg.token_budget)
        natural = natural_output_length(cfg.length_model, difficulty_tag, cfg.seed, length_key or request_id)
        shared = min(self.shared_blocks, prompt_tokens // cfg.block_size) if self.shared_blocks else 0
        return SimRequestState(
            id=request_id,
            prompt_tokens=prompt_tokens,
            target_output_tokens=min(natural, budget),
            natural_output_tokens=natural,
            reasoning_tokens_planned=round(cfg.reasoning_fraction * natural),
            shared_blocks=shared,
        )

    def submit(self, req: SimRequestState) -> None:
        if req.id in self.requests:
            raise ValueError(f"duplicate request id {req.id}")
        total_blocks = blocks_for(req.prompt_tokens + req.target_output_tokens, self.config.block_size)
        req.arrival = self.now
        self.requests[req.id] = req
        self.submitted += 1
        if total_blocks > self.config.kv_blocks_total:
            # Could never run to completion without outgrowing the whole pool.
            self._finish(req, FinishReason.ERROR)
            self.aborted += 1
            return
        self.waiting.append(req)

    def has_work(self) -> bool:
        return bool(self.running or self.waiting)

    def used_blocks(self) -> int:
        return self.config.kv_blocks_total - self.free_blocks

    def kv_usage(self) -> float:
        return self.used_blocks() / self.config.kv_blocks_total

    def _release(self, req: SimRequestState) -> None:
        self.free_blocks += req.blocks_held
        req.blocks_held = 0
        if req in self.running:
            self.running.remove(req)
        if self.shared_resident and not any(r.shared_blocks for r in self.running):
            self.free_blocks += self.shared_blocks
            self.shared_resident = False

    def _finish(self, req: SimRequestState, reason: FinishReason) -> None:
        if req.phase is Phase.DONE:
            raise InvariantViolation(f"{req.id}: finished twice")
        self.done += 1
        req.phase = Phase.DONE
        req.finish_reason = reason
        req.t_done = self.now

    def abort(self, request_id: str) -> None:
        req = self.requests.get(request_id)
        if req is None or req.phase is Phase.DONE:
            return
        if req in self.waiting:
            self.waiting.remove(req)
        self._release(req)
        self._finish(req, FinishReason.ERROR)
        self.aborted += 1

    def admit(self) -> list[str]:
        cfg = self.config
        ids = admit(
            self.waiting, len(self.running), self.free_blocks, cfg.max_running,
            cfg.block_size, self.shared_blocks, self.shared_resident,
        )
        for rid in ids:
            req = self.waiting.popleft()
            assert req.id == rid
            if req.shared_blocks and not self.shared_resident:
                self.free_blocks -= self.shared_blocks
                self.shared_resident = True
                hit = 0
            else:
                hit = req.shared_blocks * cfg.block_size
            need = req.own_blocks_needed(0, cfg.block_size)
            self.free_blocks -= need
            req.blocks_held = need
            self.blocks_allocated_total += need
            req.admitted_seq = self._admit_counter
            self._admit_counter += 1
            if req.prefilled == 0 and req.emitted_tokens == 0:
                req.prefill_needed = req.prompt_tokens - hit
                self.prefix_hit_tokens += hit
                self.prefix_query_tokens += req.prompt_tokens
            # Swapped-out requests resume where they stopped.
            req.phase = Phase.DECODE if req.prefilled >= req.prefill_needed and req.emitted_tokens else Phase.PREFILL
            self.running.append(req)
        self.peak_used_blocks = max(self.peak_used_blocks, self.used_blocks())
        return ids

    def _preempt(self, victim: SimRequestState) -> None:
        """Swap a running request out to the head of the waiting queue."""
        self._release(victim)
        victim.phase = Phase.WAITING
        victim.preemptions += 1
        self.waiting.appendleft(victim)

    def _draft_tokens(self, req: SimRequestState) -> int:
        spec = self.config.spec_decode
        if not spec.enabled:
            return 1
        rng = self._spec_rngs.get(req.id)
        if rng is None:
            rng = self._spec_rngs[req.id] = CounterRNG.substream(self.config.seed, f"sim/spec/{req.id}")
        return 1 + rng.binomial(spec.draft_len, spec.accept_prob)

    # --- iteration -------------------------------------------------------------

    def step(self) -> StepResult:
        """Run one scheduler iteration at ``self.now``."""
        cfg = self.config
        self.admit()
        if not self.running:
            raise RuntimeError("step() with no admissible work")
        t_start = self.now
        dt = max(1, round(len(self.running) * NS / cfg.decode_rate))
        t_end = t_start + dt
        prefill_chunk = max(1, math.ceil(cfg.prefill_rate * dt / NS))
        bs = cfg.block_size
        total_blocks = cfg.kv_blocks_total
        emissions: list[Emission] = []
        preempted: set[str] = set()
        finishing: list[SimRequestState] = []

        for req in list(self.running):
            if req.id in preempted:
                continue
            if req.phase is Phase.PREFILL:
                take = min(req.prefill_needed - req.prefilled, prefill_chunk)
                req.prefilled += take
                self.prompt_tokens_total += take
                self._interval_prompt += take
                if req.prefilled < req.prefill_needed:
                    continue
                req.phase = Phase.DECODE
                d = 1
            else:
                d = self._draft_tokens(req)
            d = min(d, req.target_output_tokens - req.emitted_tokens)
            if d <= 0:
                finishing.append(req)
                continue
            need = -(-(req.prompt_tokens + req.emitted_tokens + d) // bs) - req.shared_blocks - req.blocks_held
            while need > self.free_blocks:
                victim = max((r for r in self.running if r.id not in preempted), key=lambda r: r.admitted_seq)
                self._preempt(victim)
                preempted.add(victim.id)
                if victim is req:
                    break
            if req.id in preempted:
                continue
            self.free_blocks -= need
            req.blocks_held += need
            self.blocks_allocated_total += need
            if total_blocks - self.free_blocks > self.peak_used_blocks:
                self.peak_used_blocks = total_blocks - self.free_blocks
            start = req.emitted_tokens
            n_reason = max(0, min(start + d, req.reasoning_tokens_planned) - start)
            if n_reason:
                emissions.append(Emission(req.id, Visibility.REASONING, n_reason))
                req.events.append(TokenEvent(req.id, t_end, Visibility.REASONING, n_reason))
            if d - n_reason:
                emissions.append(Emission(req.id, Visibility.VISIBLE, d - n_reason))
                req.events.append(TokenEvent(req.id, t_end, Visibility.VISIBLE, d - n_reason))
            req.emitted_tokens += d
            self.generation_tokens_total += d
            self._interval_gen += d
            if req.emitted_tokens >= req.target_output_tokens:
                finishing.append(req)

        self.now = t_end
        self.iterations += 1
        finished: list[SimRequestState] = []
        for req in finishing:
            self._release(req)
            reason = (
                FinishReason.LENGTH_BUDGET
                if req.natural_output_tokens > req.target_output_tokens
                else FinishReason.STOP
            )
            self._finish(req, reason)
            self.completed += 1
            finished.append(req)
        finished.extend(self._expire())
        self._sample_telemetry()
        if self.check:
            self.check_invariants()
        return StepResult(t_start, t_end, emissions, finished)

    def _expire(self) -> list[SimRequestState]:
        limit = round(self.config.request_timeout * NS)
        expired = [r for r in list(self.running) + list(self.waiting) if self.now - r.arrival >= limit]
        for req in expired:
            if req in self.waiting:
                self.waiting.remove(req)
            self._release(req)
            self._finish(req, FinishReason.TIMEOUT)
            self.timed_out += 1
        return expired

    def advance_to(self, t: int) -> None:
        """Idle the engine until ``t`` (no running work may exist)."""
        if self.running:
            raise RuntimeError("advance_to() while requests are running")
        if t > self.now:
            self.now = t
            self._expire()
            self._sample_telemetry()

    # --- telemetry ----------------------------------------------------------------

    def _sample_telemetry(self) -> None:
        second = self.now // NS
        crossed = second - self._last_sample_s
        if crossed <= 0:
            return
        prompt_rate = self._interval_prompt / crossed
        gen_rate = self._interval_gen / crossed
        hit = self.prefix_hit_tokens / self.prefix_query_tokens if self.prefix_query_tokens else 0.0
        for s in range(self._last_sample_s + 1, second + 1):
            line = format_stats_line(
                SIM_EPOCH + s, prompt_rate, gen_rate, len(self.running), len(self.waiting), self.kv_usage(), hit
            )
            self.log_lines.append(line)
            sample = parse_engine_log_line(line, year=SIM_EPOCH_YEAR)
            assert sample is not None
            self.telemetry.append(sample)
        self._last_sample_s = second
        self._interval_prompt = 0
        self._interval_gen = 0

    def check_invariants(self) -> None:
        self.invariant_checks += 1
        cfg = self.config
        held = sum(r.blocks_held for r in self.running)
        shared = self.shared_blocks if self.shared_resident else 0
        if held + shared > cfg.kv_blocks_total:
            raise InvariantViolation(f"blocks over-allocated: {held + shared} > {cfg.kv_blocks_total}")
        if held + shared != self.used_blocks():
            raise InvariantViolation("free-block count disagrees with blocks held")
        for r in self.running:
            expected = blocks_for(r.prompt_tokens + r.emitted_tokens, cfg.block_size) - r.shared_blocks
            if r.blocks_held != expected:
                raise InvariantViolation(f"{r.id}: holds {r.blocks_held} blocks, formula says {expected}")
            if r.emitted_tokens > r.target_output_tokens:
                raise InvariantViolation(f"{r.id}: emitted past its target")
        if len(self.waiting) + len(self.running) + self.done != self.submitted:
            raise InvariantViolation("request conservation broken")
        if self.completed + self.timed_out + self.aborted != self.done:
            raise InvariantViolation("finished-request tallies disagree")


# --- offline runner -------------------------------------------------------------


@dataclass
class SimOutput:
    results: list[RequestResult]
    telemetry: list[EngineTelemetrySample]
    log_lines: list[str]
    event_rows: list[dict[str, Any]]
    engine: Engine

    def __iter__(self):
        # Unpacks as (results, telemetry).
        return iter((self.results, self.telemetry))


def estimate_prompt_tokens(messages: Iterable[dict[str, str]]) -> int:
    chars = sum(len(m.get("content", "")) for m in messages)
    return PROMPT_OVERHEAD_TOKENS + math.ceil(chars / CHARS_PER_TOKEN)


def run_id_for(config: SimConfig) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return "sim-" + hashlib.sha256(blob).hexdigest()[:12]


def run_sim(
    config: SimConfig, schedule: Sequence[ScheduledRequest], check_invariants: bool = True
) -> SimOutput:
    """Execute ``schedule`` offline.

    Entries with ``batch_index`` are dispatched closed-loop: batch ``b`` is
    submitted when every request of batch ``b - 1`` has finished.  Otherwise
    requests arrive at their ``send_offset``.
    """
    engine = Engine(config, check_invariants)
    run_id = run_id_for(config)
    if not schedule:
        return SimOutput([], [], [], [], engine)

    def make(sched: ScheduledRequest) -> SimRequestState:
        if config.prompt_tokens is not None:
            prompt = config.prompt_tokens
        else:
            prompt = estimate_prompt_tokens(render_prompt(sched.record))
        return engine.new_request(sched.request_id, prompt, sched.record.difficulty_tag)

    closed = schedule[0].batch_index is not None
    order = list(schedule)
    if closed:
        batches = deque(group_batches(schedule))
        current = [make(s) for s in batches.popleft()]
        for req in current:
            engine.submit(req)
        while True:
            if engine.has_work():
                engine.step()
            if all(r.phase is Phase.DONE for r in current):
                if not batches:
                    break
                current = [make(s) for s in batches.popleft()]
                for req in current:
                    engine.submit(req)
    else:
        pending = deque(sorted(schedule, key=lambda s: (s.send_offset, s.seq)))
        while pending or engine.has_work():
            while pending and round(pending[0].send_offset * NS) <= engine.now:
                sched = pending.popleft()
                req = make(sched)
                engine.submit(req)
                # Arrival is the planned offset even if admitted at a later boundary.
                req.arrival = round(sched.send_offset * NS)
            if engine.running or (engine.waiting and engine.admit()):
                engine.step()
            elif pending:
                engine.advance_to(round(pending[0].send_offset * NS))
            elif engine.waiting:
                raise InvariantViolation("waiting requests can never be admitted")
    # Flush the final partial second so the trace ends at the drained state.
    if engine.now % NS:
        engine.advance_to((engine.now // NS + 1) * NS)

    results, rows = [], []
    for sched in order:
        req = engine.requests[sched.request_id]
        result, row = sim_result(req, sched.record.id, run_id, config.token_budget)
        results.append(result)
        rows.append(row)
    return SimOutput(results, engine.telemetry, engine.log_lines, rows, engine)


def sim_result(
    req: SimRequestState, record_id: str, run_id: str, token_budget: int
) -> tuple[RequestResult, dict[str, Any]]:
    assert req.t_done is not None and req.finish_reason is not None
    events = req.events
    finish = req.finish_reason
    if finish is FinishReason.STOP and not events:
        finish = FinishReason.ERROR
    timing = timing_from_events(req.arrival, req.t_done, events)
    metrics = compute_request_metrics(events, timing, token_budget, finish)
    result = RequestResult(
        request_id=req.id,
        record_id=record_id,
        run_id=run_id,
        timing=timing,
        metrics=metrics,
        # Same placeholder answer the served simulator streams on a natural stop.
        raw_visible_text=PLACEHOLDER_ANSWER if finish is FinishReason.STOP and metrics.visible_tokens else "",
        error=None if finish is not FinishReason.ERROR else "request exceeds simulated KV capacity",
    )
    return result, event_log_row(req.id, timing, events, token_budget, finish)
