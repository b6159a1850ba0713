"""Dataset ingestion, prompt rendering, and arrival schedules."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from itertools import accumulate
from pathlib import Path
from typing import Any, Sequence

from .core import DatasetRecord, TaskKind
from .prng import CounterRNG

LETTERS = ("A", "B", "C", "D")

SYSTEM_PROMPT = "You are a helpful assistant."
BOXED_INSTRUCTION = "Please reason step by step, and put your final answer within \\boxed{}."
LETTER_INSTRUCTION = (
    "Please reason step by step, and finish with the letter of the correct option "
    "(A, B, C, or D) as your final answer."
)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class ScheduledRequest:
    seq: int
    record: DatasetRecord
    send_offset: float | None = None
    batch_index: int | None = None

    @property
    def request_id(self) -> str:
        return f"r{self.seq:06d}"

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "record_id": self.record.id,
            "send_offset": self.send_offset,
            "batch_index": self.batch_index,
        }


@dataclass(frozen=True)
class WorkloadPlan:
    records: tuple[DatasetRecord, ...]
    arrival: str = "closed_batch"
    batch_size: int = 8
    gamma_shape: float = 2.0
    gamma_scale: float = 0.5
    capacity: int = 100
    repeat: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.arrival not in ("closed_batch", "gamma"):
            raise ValueError(f"unknown arrival discipline {self.arrival!r}")
        if self.capacity > len(self.records):
            raise ValueError(f"capacity {self.capacity} exceeds dataset size {len(self.records)}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.gamma_shape <= 0 or self.gamma_scale <= 0:
            raise ValueError("gamma shape and scale must be positive")
        if self.repeat < 1:
            raise ValueError("repeat must be >= 1")

    def schedule(self) -> list[ScheduledRequest]:
        """Flat dispatch-ordered schedule for this plan."""
        if self.arrival == "closed_batch":
            batches = build_closed_batches(
                self.records, self.batch_size, self.capacity, self.repeat, self.seed
            )
            return [r for batch in batches for r in batch]
        return build_gamma_schedule(
            self.records, self.gamma_shape, self.gamma_scale, self.capacity, self.repeat, self.seed
        )

    def describe(self) -> dict[str, Any]:
        d = {
            "arrival": self.arrival,
            "capacity": self.capacity,
            "repeat": self.repeat,
            "seed": self.seed,
            "dataset_size": len(self.records),
        }
        if self.arrival == "closed_batch":
            d["batch_size"] = self.batch_size
        else:
            d["gamma_shape"] = self.gamma_shape
            d["gamma_scale"] = self.gamma_scale
        return d


# --- datasets ---------------------------------------------------------------


def _gold_from_row(row: dict[str, Any], kind: TaskKind) -> str:
    for key in ("answer", "gold_answer", "gold"):
        if key in row and row[key] is not None:
            gold = str(row[key]).strip()
            break
    else:
        raise KeyError("answer")
    if kind is TaskKind.GSM8K and "####" in gold:
        gold = gold.rsplit("####", 1)[1].strip()
    return gold.replace(",", "") if kind is TaskKind.GSM8K else gold


def _gpqa_fields(row: dict[str, Any], gold: str, seed: int, rid: str) -> tuple[tuple[str, ...], str]:
    choices = row.get("choices")
    if not isinstance(choices, list) or len(choices) != 4:
        raise ValueError("gpqa record needs a 4-element 'choices' list")
    choices = [str(c) for c in choices]
    if gold in LETTERS:
        correct = LETTERS.index(gold)
    elif gold in choices:
        correct = choices.index(gold)
    else:
        raise ValueError("gpqa answer is neither a letter A-D nor one of the choices")
    order = list(range(4))
    CounterRNG.substream(seed, f"gpqa-choices/{rid}").shuffle(order)
    shuffled = tuple(choices[i] for i in order)
    return shuffled, LETTERS[order.index(correct)]


def load_dataset(path: str | Path, task_kind: TaskKind | str, seed: int = 0) -> list[DatasetRecord]:
    """Read a JSON-lines dataset file into validated records.

    Accepted prompt keys are ``prompt``, ``question`` and ``problem``; the gold
    answer comes from ``answer`` (GSM8K ``#### n`` suffixes are unwrapped).
    GPQA choices are permuted per record from the seed, with the gold letter
    remapped to the new order.
    """
    kind = TaskKind(task_kind)
    path = Path(path)
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("line is not a JSON object")
                rid = str(row.get("id", lineno - 1))
                prompt = next(
                    (row[k] for k in ("prompt", "question", "problem") if row.get(k)), None
                )
                if prompt is None:
                    raise KeyError("prompt")
                gold = _gold_from_row(row, kind)
                choices = None
                if kind is TaskKind.GPQA:
                    choices, gold = _gpqa_fields(row, gold, seed, rid)
                tag = row.get("difficulty_tag", row.get("level"))
                if isinstance(tag, str):
                    tag = int("".join(ch for ch in tag if ch.isdigit()) or 0) or None
                if rid in seen:
                    raise ValueError(f"duplicate id {rid!r}")
                seen.add(rid)
                records.append(
                    DatasetRecord(
                        id=rid,
                        prompt=str(prompt),
                        gold_answer=gold,
                        task_kind=kind,
                        difficulty_tag=tag,
                        choices=choices,
                    )
                )
            except KeyError as exc:
                raise DatasetError(f"{path}:{lineno}: missing field {exc.args[0]!r}") from None
            except (ValueError, TypeError) as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return records


def dataset_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def render_prompt(record: DatasetRecord, mode: str = "reasoning") -> list[dict[str, str]]:
    """System + user chat messages for one record."""
    if mode not in ("reasoning", "standard"):
        raise ValueError(f"unknown prompt mode {mode!r}")
    body = record.prompt.strip()
    if record.task_kind is TaskKind.GPQA:
        options = "\n".join(f"{letter}) {text}" for letter, text in zip(LETTERS, record.choices or ()))
        body = f"{body}\n\n{options}"
    if mode == "reasoning":
        instruction = LETTER_INSTRUCTION if record.task_kind is TaskKind.GPQA else BOXED_INSTRUCTION
        body = f"{body}\n\n{instruction}"
    return [
        {"role": "system", "content": SYSTEM_PROMPT},
        {"role": "user", "content": body},
    ]


# --- schedules --------------------------------------------------------------


def select_records(
    records: Sequence[DatasetRecord], capacity: int, seed: int
) -> list[DatasetRecord]:
    if capacity > len(records):
        raise ValueError(f"capacity {capacity} exceeds dataset size {len(records)}")
    pool = list(records)
    CounterRNG.substream(seed, "workload/select").shuffle(pool)
    return pool[:capacity]


def build_closed_batches(
    records: Sequence[DatasetRecord],
    batch_size: int,
    capacity: int,
    repeat: int = 1,
    seed: int = 0,
) -> list[list[ScheduledRequest]]:
    """Seeded selection of ``capacity`` records, chunked into dispatch batches.

    Each repeat is chunked on its own, so a batch never spans two repeats and
    the last batch of a repeat may be short.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if repeat < 1:
        raise ValueError("repeat must be >= 1")
    chosen = select_records(records, capacity, seed)
    batches: list[list[ScheduledRequest]] = []
    seq = 0
    for _ in range(repeat):
        for start in range(0, len(chosen), batch_size):
            batch = []
            for rec in chosen[start : start + batch_size]:
                batch.append(ScheduledRequest(seq=seq, record=rec, batch_index=len(batches)))
                seq += 1
            batches.append(batch)
    return batches


def gamma_interarrival(shape: float, scale: float, n: int, seed: int) -> list[float]:
    """``n`` i.i.d. Gamma(shape, scale) inter-arrival gaps in seconds.

    Mean gap is ``shape * scale``; the coefficient of variation is
    ``1/sqrt(shape)``, so smaller shapes give burstier traffic at a fixed rate.
    """
    if shape <= 0 or scale <= 0:
        raise ValueError("gamma shape and scale must be positive")
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = CounterRNG.substream(seed, "workload/gamma")
    return [rng.gamma(shape, scale) for _ in range(n)]


def build_gamma_schedule(
    records: Sequence[DatasetRecord],
    shape: float,
    scale: float,
    capacity: int,
    repeat: int = 1,
    seed: int = 0,
) -> list[ScheduledRequest]:
    chosen = select_records(records, capacity, seed) * repeat
    if not chosen:
        return []
    offsets = list(accumulate(gamma_interarrival(shape, scale, len(chosen), seed)))
    return [
        ScheduledRequest(seq=i, record=rec, send_offset=off)
        for i, (rec, off) in enumerate(zip(chosen, offsets))
    ]


def group_batches(schedule: Sequence[ScheduledRequest]) -> list[list[ScheduledRequest]]:
    """Regroup a flat closed-batch schedule by ``batch_index``, keeping order."""
    batches: dict[int, list[ScheduledRequest]] = {}
    for req in schedule:
        if req.batch_index is None:
            raise ValueError("schedule entry has no batch_index")
        batches.setdefault(req.batch_index, []).append(req)
    return [batches[k] for k in sorted(batches)]
