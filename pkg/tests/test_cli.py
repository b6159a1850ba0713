from __future__ import annotations

import csv
import json
import os
import shutil
import signal
import subprocess
import sys
from pathlib import Path

import pytest

from servebench.cli import main
from servebench.core import read_jsonl
from servebench.simengine import LengthModel, SimConfig
from servebench.simengine.server import serve_in_thread

GOLDEN = Path(__file__).parent / "data" / "golden"
SERIES = ("kv_usage", "running", "e2e_cdf", "per_dataset")

FAST = SimConfig(
    decode_rate=200.0,
    time_compression=50.0,
    prompt_tokens=64,
    length_model=LengthModel(mu=4.0, sigma=0.5),
    reasoning_fraction=0.5,
)

ASU_FIELDS = {
    "ttft", "ttfvt", "tbt", "e2e", "output_tokens", "visible_tokens", "reasoning_tokens",
    "finish_reason",
}


def write_json(path: Path, doc: dict) -> Path:
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def small_sim_doc(preset: str, count: int = 16) -> dict:
    return {
        "sim": {"preset": preset},
        "workload": {
            "synthetic": {"count": count, "task": "gsm8k"},
            "task": "gsm8k", "arrival": "batch", "batch_size": count, "capacity": count, "seed": 1,
        },
    }


@pytest.fixture(scope="module")
def sim_url():
    with serve_in_thread(FAST) as server:
        yield server.url


def bench_run(url: str, out: Path, data_dir: Path, *extra: str) -> int:
    return main([
        "run", "--endpoint", url, "--dataset", str(data_dir / "gsm8k_sample.jsonl"), "--task", "gsm8k",
        "--arrival", "batch", "--batch-size", "8", "--capacity", "16", "--seed", "7",
        "--metrics-url", url + "/metrics", "--out", str(out), *extra,
    ])


# --- run ----------------------------------------------------------------------------------


def test_closed_batch_run_writes_all_outputs(sim_url, tmp_path, data_dir):
    out = tmp_path / "run"
    assert bench_run(sim_url, out, data_dir) == 0
    assert {p.name for p in out.iterdir()} >= {
        "manifest.json", "requests.jsonl", "events.jsonl", "telemetry.csv", "summary.json",
    }
    rows = read_jsonl(out / "requests.jsonl")
    assert len(rows) == 16
    for row in rows:
        assert ASU_FIELDS <= set(row["metrics"])
        assert row["correct"] in (True, False)
    header = (out / "telemetry.csv").read_text().splitlines()[0]
    assert header == "t_offset_s,prompt_tps,gen_tps,running,waiting,kv_usage,prefix_hit"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["request_count"] == 16
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["prng"] == "splitmix64-ctr/v1" and len(manifest["dataset"]["sha256"]) == 64


def test_sweep_writes_one_directory_per_cell(sim_url, tmp_path, data_dir):
    cfg = write_json(tmp_path / "c.json", {
        "endpoint": {"base_url": sim_url},
        "workload": {"dataset": str(data_dir / "gsm8k_sample.jsonl"), "task": "gsm8k", "batch_size": 4, "capacity": 4},
        "sweep": {"max_tokens": [512, 4096]},
        "output_dir": str(tmp_path / "sweep"),
    })
    assert main(["run", "--config", str(cfg)]) == 0
    cells = sorted(p.name for p in (tmp_path / "sweep").iterdir() if p.is_dir())
    assert cells == ["mt4096_bs4", "mt512_bs4"]
    for cell in cells:
        assert len(read_jsonl(tmp_path / "sweep" / cell / "requests.jsonl")) == 4


def test_missing_dataset_fails_before_writing(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["run", "--endpoint", "http://127.0.0.1:9", "--dataset", str(tmp_path / "nope.jsonl"),
                 "--task", "gsm8k", "--out", str(out)])
    assert code != 0
    assert not out.exists()
    assert "bench: error" in capsys.readouterr().err


def test_run_without_endpoint_is_config_error(tmp_path):
    assert main(["run", "--dataset", "x.jsonl", "--task", "gsm8k", "--out", str(tmp_path / "o")]) == 2


def test_repeated_runs_agree(sim_url, tmp_path, data_dir):
    a, b = tmp_path / "a", tmp_path / "b"
    assert bench_run(sim_url, a, data_dir) == 0
    assert bench_run(sim_url, b, data_dir) == 0
    ra, rb = read_jsonl(a / "requests.jsonl"), read_jsonl(b / "requests.jsonl")
    assert [r["record_id"] for r in ra] == [r["record_id"] for r in rb]
    sa, sb = (json.loads((d / "summary.json").read_text()) for d in (a, b))
    assert sa["accuracy"] == sb["accuracy"]


# --- score --------------------------------------------------------------------------------


def test_score_regrade_is_byte_identical(sim_url, tmp_path, data_dir):
    run = tmp_path / "run"
    assert bench_run(sim_url, run, data_dir) == 0
    assert main(["score", str(run), "--out", str(tmp_path / "regraded.jsonl")]) == 0
    assert (tmp_path / "regraded.jsonl").read_bytes() == (run / "requests.jsonl").read_bytes()


def _scored_rows(tmp_path: Path, answers: list[str], ids: list[str]) -> Path:
    rows = []
    for rid, text in zip(ids, answers):
        rows.append({
            "request_id": f"r-{rid}", "record_id": rid, "run_id": "x",
            "timing": {"t_send": 0, "t_first_token": 1, "t_first_visible": 1, "t_last_token": 2, "t_done": 2},
            "metrics": {"ttft": 1e-9, "ttfvt": 1e-9, "tbt": None, "e2e": 2e-9, "output_tokens": 1,
                        "visible_tokens": 1, "reasoning_tokens": 0, "finish_reason": "stop"},
            "raw_visible_text": text,
        })
    path = tmp_path / "requests.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_score_three_of_four(tmp_path, data_dir, capsys):
    # gsm8k_sample golds for gsm-000..gsm-003 are 0, 4, 7, 10
    ids = ["gsm-000", "gsm-001", "gsm-002", "gsm-003"]
    path = _scored_rows(tmp_path, ["\\boxed{0}", "4", "so 7", "wrong 99"], ids)
    code = main(["score", str(path), "--dataset", str(data_dir / "gsm8k_sample.jsonl"), "--task", "gsm8k"])
    assert code == 0
    assert "accuracy: 75.00%" in capsys.readouterr().out


def test_score_unknown_ids(tmp_path, data_dir, capsys):
    path = _scored_rows(tmp_path, ["1"], ["zzz"])
    assert main(["score", str(path), "--dataset", str(data_dir / "gsm8k_sample.jsonl"), "--task", "gsm8k"]) == 2
    assert "zzz" in capsys.readouterr().err


# --- sim run --------------------------------------------------------------------------------


def test_sim_run_is_byte_identical(tmp_path):
    cfg = write_json(tmp_path / "s.json", small_sim_doc("burst", 32))
    for name in ("a", "b"):
        assert main(["sim", "run", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    for f in ("requests.jsonl", "telemetry.csv", "events.jsonl", "summary.json", "manifest.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes(), f


def test_sim_run_invalid_config(tmp_path, capsys):
    cfg = write_json(tmp_path / "s.json", {"sim": {"kv_blocks": 3}})
    assert main(["sim", "run", "--config", str(cfg), "--out", str(tmp_path / "o")]) != 0
    assert "bench: error" in capsys.readouterr().err


def test_sim_serve_stops_cleanly_on_sigint(tmp_path):
    cfg = write_json(tmp_path / "s.json", {"sim": {}})
    proc = subprocess.Popen(
        [sys.executable, "-m", "servebench.cli", "sim", "serve", "--config", str(cfg), "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        # Keep the child out of the test runner's process group.
        start_new_session=True,
    )
    try:
        line = proc.stdout.readline()
        assert "listening on" in line
        proc.send_signal(signal.SIGINT)
        assert proc.wait(timeout=10) == 0
        assert "simulator stopped" in proc.stderr.read()
    finally:
        if proc.poll() is None:
            proc.kill()


# --- report -----------------------------------------------------------------------------------


def _sim_pair(root: Path) -> list[Path]:
    dirs = []
    for preset in ("rllm-like", "llm-like"):
        cfg = write_json(root / f"{preset}.json", small_sim_doc(preset))
        out = root / preset
        assert main(["sim", "run", "--config", str(cfg), "--out", str(out)]) == 0
        dirs.append(out)
    return dirs


def test_report_single_run_writes_four_series(tmp_path):
    run = _sim_pair(tmp_path)[1]
    assert main(["report", str(run), "--out", str(tmp_path / "rep")]) == 0
    for name in SERIES:
        assert (tmp_path / "rep" / f"{name}.csv").is_file()
        assert (tmp_path / "rep" / f"{name}.svg").read_text().startswith("<svg")
    with open(tmp_path / "rep" / "comparison.csv") as f:
        assert len(list(csv.DictReader(f))) == 1


def test_report_two_runs_matches_golden(tmp_path):
    runs = _sim_pair(tmp_path)
    out = tmp_path / "rep"
    assert main(["report", *map(str, runs), "--out", str(out)]) == 0
    if os.environ.get("SERVEBENCH_UPDATE_GOLDEN"):
        GOLDEN.mkdir(parents=True, exist_ok=True)
        for name in ("comparison", *SERIES):
            shutil.copy(out / f"{name}.csv", GOLDEN / f"{name}.csv")
    for name in ("comparison", *SERIES):
        assert (out / f"{name}.csv").read_text() == (GOLDEN / f"{name}.csv").read_text(), name
    with open(out / "comparison.csv") as f:
        rows = {r["label"]: r for r in csv.DictReader(f)}
    # Every synthetic gold is 0 and the simulator answers 0 on a natural stop.
    assert rows["llm-like"]["accuracy_pct"] == "100"
    assert float(rows["rllm-like"]["ttfvt_mean"]) > float(rows["llm-like"]["ttfvt_mean"])
    # One decode-bound batch emits at exactly the preset decode rate.
    assert float(rows["rllm-like"]["tps"]) == float(rows["llm-like"]["tps"]) == 1500.0


def test_report_empty_directory(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["report", str(tmp_path / "empty"), "--out", str(tmp_path / "rep")]) == 2
    assert "no run outputs" in capsys.readouterr().err
