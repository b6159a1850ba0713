"""Named simulator configurations for desk-scale serving experiments.

``RLLM_LIKE`` emits long, heavy-tailed think-then-answer outputs; ``LLM_LIKE``
emits short fixed answers.  Both share the same hardware model so their KV
traces are directly comparable on one schedule.
"""

from __future__ import annotations

import math
from dataclasses import replace

from .engine import LengthModel, SimConfig

_HARDWARE = dict(
    kv_blocks_total=8192,
    block_size=16,
    max_running=256,
    prefill_rate=50_000.0,
    decode_rate=1_500.0,
    token_budget=8192,
    prompt_tokens=64,
)

RLLM_LIKE = SimConfig(
    length_model=LengthModel(family="lognormal", mu=math.log(4000), sigma=0.6),
    reasoning_fraction=0.9,
    label="rllm-like",
    **_HARDWARE,
)

LLM_LIKE = SimConfig(
    length_model=LengthModel(family="fixed", value=128),
    reasoning_fraction=0.0,
    label="llm-like",
    **_HARDWARE,
)

# Small pool, ~1 s of decode per request at full batch: Gamma bursts saturate it.
BURST = SimConfig(
    kv_blocks_total=2048,
    block_size=16,
    max_running=256,
    decode_rate=2_000.0,
    prompt_tokens=64,
    token_budget=8192,
    length_model=LengthModel(family="lognormal", mu=math.log(700), sigma=0.5),
    reasoning_fraction=0.9,
    label="burst",
)

PRESETS = {"rllm-like": RLLM_LIKE, "llm-like": LLM_LIKE, "burst": BURST}


def preset(name: str, **overrides) -> SimConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(base, **overrides)
