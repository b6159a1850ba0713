"""Continuous-batching, paged-KV serving simulator."""

from .engine import (
    Engine,
    InvariantViolation,
    LengthModel,
    PrefixCacheConfig,
    SimConfig,
    SimOutput,
    SimRequestState,
    SpecDecodeConfig,
    admit,
    run_sim,
    sample_output_length,
)

__all__ = [
    "Engine",
    "InvariantViolation",
    "LengthModel",
    "PrefixCacheConfig",
    "SimConfig",
    "SimOutput",
    "SimRequestState",
    "SpecDecodeConfig",
    "admit",
    "run_sim",
    "sample_output_length",
]
