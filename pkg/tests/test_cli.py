import csv
import json

import pytest

from kvsim.cli import main
from kvsim.config import config_from_dict, config_to_dict, load_config
from kvsim.core import ConfigError, PRESET_MODELS
from kvsim.engine import EngineConfig
from kvsim.report import load_run


@pytest.fixture
def trace(tmp_path):
    path = tmp_path / "trace.jsonl"
    assert main(["gen-trace", "--count", "120", "--dist", "lognormal-mean:200,0.6",
                 "--prompt-dist", "uniform:0,40", "--seed", "1", "--predict-accuracy", "0.8",
                 "--out", str(path)]) == 0
    return path


@pytest.fixture
def desk_config(tmp_path):
    path = tmp_path / "desk.toml"
    path.write_text(
        "[model]\npreset = \"gpt-neox\"\n"
        "[gpu]\nhbm_capacity = 62145925120\n"  # weights + 10 max-length reservations
    )
    return path


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_empty_config_is_reference_setup(tmp_path):
    path = tmp_path / "empty.toml"
    path.write_text("")
    cfg = load_config(str(path))
    assert cfg == EngineConfig()
    assert cfg.model == PRESET_MODELS["gpt-neox"] and cfg.slo_per_token == 0.1875


def test_config_round_trip():
    cfg = EngineConfig(batch_size_cap=32, row_placement="random")
    assert config_from_dict(config_to_dict(cfg)) == cfg


@pytest.mark.parametrize("doc", [
    {"gpu": {"hbm_capacity": 1}},                 # weights do not fit
    {"model": {"preset": "gpt-5"}},
    {"predictor": {"mode": "psychic"}},
    {"engine": {"colour": "blue"}},
    {"mystery": {}},
    {"model": {"num_layers": 2.5, "hidden_dim": 8}},
])
def test_bad_configs(doc):
    with pytest.raises(ConfigError):
        config_from_dict(doc)


def test_custom_model_from_config():
    cfg = config_from_dict({"model": {"num_layers": 2, "hidden_dim": 8, "max_seq_len": 128}})
    assert cfg.model.name == "custom" and cfg.model.max_seq_len == 128


def test_gen_trace_fixed_offline(tmp_path):
    out = tmp_path / "t.jsonl"
    assert main(["gen-trace", "--count", "10", "--dist", "fixed:60", "--out", str(out)]) == 0
    recs = [json.loads(l) for l in out.read_text().splitlines()]
    assert len(recs) == 10 and all(r["output_tokens"] == 60 and r["arrival_s"] == 0 for r in recs)


def test_gen_trace_bad_distribution(tmp_path):
    assert main(["gen-trace", "--count", "3", "--dist", "zipf:2", "--out", str(tmp_path / "x")]) == 1


def test_simulate_outputs(tmp_path, trace, desk_config):
    out = tmp_path / "oracle"
    assert main(["simulate", "--config", str(desk_config), "--trace", str(trace),
                 "--policy", "oracle", "--out", str(out)]) == 0
    for name in ("run_summary.json", "sequences.csv", "iterations.csv", "events.csv"):
        assert (out / name).exists()
    assert rows(out / "events.csv") == []
    summary = json.loads((out / "run_summary.json").read_text())
    assert summary["sequences_completed"] == 120
    assert summary["generation_s"] + summary["penalty_s"] + summary["overhead_s"] == summary["total_time_s"]
    rep = load_run(str(out))
    assert rep.sequences_completed == 120 and len(rep.iterations) == rep.num_iterations


def test_csv_columns_stable_across_policies(tmp_path, trace, desk_config):
    headers = set()
    for policy in ("oracle", "predicted", "max_length", "trace_provided"):
        out = tmp_path / policy
        assert main(["simulate", "--config", str(desk_config), "--trace", str(trace),
                     "--policy", policy, "--out", str(out)]) == 0
        headers.add(tuple((out / n).read_text().splitlines()[0] for n in
                          ("sequences.csv", "iterations.csv", "events.csv")))
    assert len(headers) == 1


def test_predicted_beats_max_length_batch(tmp_path, trace, desk_config):
    for policy in ("predicted", "max_length"):
        assert main(["simulate", "--config", str(desk_config), "--trace", str(trace),
                     "--policy", policy, "--out", str(tmp_path / policy)]) == 0
    pred = json.loads((tmp_path / "predicted" / "run_summary.json").read_text())
    mx = json.loads((tmp_path / "max_length" / "run_summary.json").read_text())
    assert pred["average_batch_size"] > mx["average_batch_size"]


def test_simulate_flag_overrides(tmp_path, trace):
    out = tmp_path / "o"
    assert main(["simulate", "--trace", str(trace), "--policy", "oracle", "--out", str(out),
                 "--batch-cap", "4", "--slo-per-token", "10", "--seed", "3"]) == 0
    s = json.loads((out / "run_summary.json").read_text())
    assert s["slo_per_token"] == 10.0 and s["config"]["engine"]["batch_size_cap"] == 4
    assert max(int(r["batch_size"]) for r in rows(out / "iterations.csv")) == 4


def test_malformed_trace_exit_code(tmp_path, capsys):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": 0, "arrival_s": 0, "prompt_tokens": 0, "output_tokens": 5}\n{oops\n')
    assert main(["simulate", "--trace", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "line 2" in capsys.readouterr().err


def test_unschedulable_exit_code(tmp_path, capsys):
    cfg = tmp_path / "small.toml"
    cfg.write_text("[gpu]\nhbm_capacity = 40001000000\n")
    tr = tmp_path / "t.jsonl"
    tr.write_text('{"id": 42, "arrival_s": 0, "prompt_tokens": 0, "output_tokens": 5}\n')
    assert main(["simulate", "--config", str(cfg), "--trace", str(tr), "--policy", "max_length",
                 "--out", str(tmp_path / "o")]) == 3
    assert "request 42" in capsys.readouterr().err


def test_trace_provided_without_column(tmp_path):
    tr = tmp_path / "t.jsonl"
    tr.write_text('{"id": 0, "arrival_s": 0, "prompt_tokens": 0, "output_tokens": 5}\n')
    assert main(["simulate", "--trace", str(tr), "--policy", "trace_provided",
                 "--out", str(tmp_path / "o")]) == 2


def test_usage_errors(tmp_path):
    assert main([]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["simulate", "--policy", "nope", "--trace", "x", "--out", "y"])
    assert exc.value.code == 1
    assert main(["analyze"]) == 1
    assert main(["analyze", "--n", "3", "--sum-sp", "10"]) == 1


def test_help_documents_columns(capsys):
    with pytest.raises(SystemExit):
        main(["simulate", "--help"])
    text = capsys.readouterr().out
    assert "slo_met" in text and "iteration_latency" in text and "rearranged_bytes" in text


def test_sweep_gpus(tmp_path, trace):
    cfg = tmp_path / "gpt3.toml"
    cfg.write_text("[model]\npreset = \"gpt3-175b\"\n[gpu]\nnum_gpus = 6\n")
    out = tmp_path / "sweep"
    assert main(["sweep", "--config", str(cfg), "--trace", str(trace), "--gpus", "6,8,10",
                 "--policy", "predicted", "--out", str(out)]) == 0
    table = rows(out / "comparison.csv")
    assert [float(r["pipeline_factor"]) for r in table] == [16 / 96, 12 / 96, 10 / 96]
    assert all(r["status"] == "ok" for r in table)


def test_sweep_records_failures(tmp_path, trace):
    cfg = tmp_path / "gpt3.toml"
    cfg.write_text("[model]\npreset = \"gpt3-175b\"\n[gpu]\nnum_gpus = 6\n")
    out = tmp_path / "sweep"
    # 4 GPUs cannot hold the weights; the other point still runs
    assert main(["sweep", "--config", str(cfg), "--trace", str(trace), "--gpus", "4,6",
                 "--out", str(out)]) == 0
    table = rows(out / "comparison.csv")
    assert [r["status"] for r in table] == ["error", "ok"]
    assert "does not fit" in table[0]["error"]


def test_single_point_sweep_matches_simulate(tmp_path, trace, desk_config):
    assert main(["sweep", "--config", str(desk_config), "--trace", str(trace),
                 "--policy", "predicted", "--out", str(tmp_path / "sw")]) == 0
    assert main(["simulate", "--config", str(desk_config), "--trace", str(trace),
                 "--policy", "predicted", "--out", str(tmp_path / "sim")]) == 0
    for name in ("run_summary.json", "sequences.csv", "iterations.csv", "events.csv"):
        assert (tmp_path / "sw" / "point_000" / name).read_bytes() == (tmp_path / "sim" / name).read_bytes()


def test_accuracy_sweep_evictions_non_increasing(tmp_path, trace, desk_config):
    out = tmp_path / "acc"
    assert main(["sweep", "--config", str(desk_config), "--trace", str(trace), "--policy", "predicted",
                 "--accuracy", "0.5,0.9861,1.0", "--seed", "3", "--out", str(out)]) == 0
    evictions = [int(r["eviction_count"]) for r in rows(out / "comparison.csv")]
    assert evictions[0] >= evictions[1] >= evictions[2] == 0


def test_sweep_parallel_matches_serial(tmp_path, trace, desk_config):
    base = ["sweep", "--config", str(desk_config), "--trace", str(trace),
            "--policy", "oracle,max_length"]
    assert main(base + ["--out", str(tmp_path / "a")]) == 0
    assert main(base + ["--out", str(tmp_path / "b"), "--jobs", "2"]) == 0
    assert (tmp_path / "a" / "comparison.csv").read_bytes() == (tmp_path / "b" / "comparison.csv").read_bytes()


def test_analyze_inline(capsys):
    assert main(["analyze", "--n", "4", "--sum-sp", "100", "--sum-sa", "100", "--p", "0"]) == 0
    out = capsys.readouterr().out
    assert "underutilization ratio: 1\n" in out and "expected pool penalty s: 0\n" in out


def test_analyze_trace_max_length(tmp_path, capsys):
    tr = tmp_path / "t.jsonl"
    tr.write_text("".join(
        json.dumps({"id": i, "arrival_s": 0, "prompt_tokens": 0, "output_tokens": n}) + "\n"
        for i, n in enumerate([100, 300, 150, 250])))
    assert main(["analyze", "--trace", str(tr), "--policy", "max_length"]) == 0
    out = capsys.readouterr().out
    assert "underutilization ratio: 0.0976562\n" in out


def test_analyze_run_dir(tmp_path, trace, desk_config, capsys):
    for policy in ("oracle", "max_length"):
        assert main(["simulate", "--config", str(desk_config), "--trace", str(trace),
                     "--policy", policy, "--out", str(tmp_path / policy)]) == 0
    capsys.readouterr()
    assert main(["analyze", "--run", str(tmp_path / "oracle")]) == 0
    out = capsys.readouterr().out
    assert "pool_penalty_s: simulated=0 closed_form=0" in out and "overall: PASS" in out
    assert main(["analyze", "--run", str(tmp_path / "max_length"),
                 "--reference", str(tmp_path / "oracle")]) == 0
    text = (tmp_path / "max_length" / "validation.txt").read_text()
    assert "batch_size_ratio" in text
