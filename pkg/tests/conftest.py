from __future__ import annotations

from pathlib import Path

import pytest

from servebench.core import DatasetRecord
from servebench.runner import synthetic_records
from servebench.workload import ScheduledRequest, WorkloadPlan

DATA = Path(__file__).parent / "data"

# Filled by tests/test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])


def closed_schedule(
    n: int, batch_size: int, tags: list[int] | None = None, seed: int = 1
) -> list[ScheduledRequest]:
    recs = synthetic_records(n, difficulty_tags=tags)
    return WorkloadPlan(
        records=tuple(recs), arrival="closed_batch", batch_size=batch_size, capacity=n, seed=seed
    ).schedule()


def gamma_schedule(n: int, shape: float, scale: float, seed: int = 1) -> list[ScheduledRequest]:
    recs = synthetic_records(n)
    return WorkloadPlan(
        records=tuple(recs), arrival="gamma", gamma_shape=shape, gamma_scale=scale, capacity=n, seed=seed
    ).schedule()


@pytest.fixture
def data_dir() -> Path:
    return DATA


@pytest.fixture
def gsm8k_records() -> list[DatasetRecord]:
    from servebench.workload import load_dataset

    return load_dataset(DATA / "gsm8k_sample.jsonl", "gsm8k")
