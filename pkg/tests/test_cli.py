import csv
import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from fedflow import adapter, cli, pipeline


def _regime(base, amp, sensors, noise, district="12", peaks=(8.0, 17.5)):
    return {"base_flow": base, "daily_amplitude": amp, "sensor_count": sensors, "noise_std": noise,
            "zero_dropout_prob": 0.001, "peak_hours": list(peaks), "district": district, "drift_std": 0.05}


SMALL = {
    "seed": 7,
    "data": {
        "days": 10,
        "regimes": {
            "A1-N": _regime(300, 200, 6, 6),
            "A1-S": _regime(290, 190, 6, 6, peaks=(7.5, 17.0)),
            "B2-N": _regime(150, 100, 4, 4),
            "B2-S": _regime(140, 95, 4, 4, peaks=(7.0, 16.5)),
            "C3-E": _regime(60, 40, 3, 2),
            "C3-W": _regime(55, 40, 3, 2, peaks=(6.5, 17.0)),
            "Z9-N": _regime(200, 150, 3, 5, district="4"),
            "Z9-S": _regime(195, 145, 3, 5, district="4", peaks=(7.5, 17.0)),
        },
    },
    "split": {"train_start": "2019-01-07 00:00:00", "train_end": "2019-01-14 00:00:00",
              "test_end": "2019-01-17 00:00:00"},
    "select": {"k_range": [2, 3], "n_init": 2, "domain_cluster": "A1-N", "domain_max_sensors": 12,
               "band": [3, 6], "fed_k": 2},
    "prompts": {"domain_samples": 200, "client_train_samples": 80, "client_test_samples": 40,
                "zero_shot_samples": 60},
    "model": {"hidden": [16, 16],
              "pretrain": {"total_steps": 150, "warmup_steps": 10, "effective_batch_size": 32},
              "central": {"total_steps": 20, "warmup_steps": 5}},
    "fed": {"rounds": 2, "local_steps": 10, "train": {"warmup_steps": 3}},
    "eval": {"zero_shot_sizes": [20, 40]},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(SMALL))
    return p


def _run(*args):
    return cli.run([str(a) for a in args])


def test_missing_input_path(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"synthetic": False, "flow_csv": str(tmp_path / "nope.csv"),
                                        "meta_csv": str(tmp_path / "meta.csv")}}))
    assert _run("ingest", "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_MISSING_PATH
    assert "nope.csv" in capsys.readouterr().err


def test_missing_config(tmp_path):
    assert _run("ingest", "--config", tmp_path / "absent.json", "--out", tmp_path) == 2


def test_missing_upstream_artifacts(tmp_path, config):
    assert _run("train-central", "--config", config, "--out", tmp_path / "empty") == 2


def test_rerun_guard(tmp_path, config):
    out = tmp_path / "o"
    assert _run("ingest", "--config", config, "--out", out) == 0
    assert _run("ingest", "--config", config, "--out", out) == cli.EXIT_OUTPUT_EXISTS
    assert _run("ingest", "--config", config, "--out", out, "--force") == 0


def test_insufficient_candidates(tmp_path):
    src = Path(__file__).parent / "data" / "corridor_features.csv"
    rows = src.read_text().splitlines()
    small = tmp_path / "f.csv"
    small.write_text("\n".join(rows[:4]) + "\n")
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"select": {"domain_cluster": "I5-N", "domain_max_sensors": 200}}))
    # three corridors cannot fill four federated clients
    assert _run("select", "--features-csv", small, "--config", cfg, "--out", tmp_path / "o") == cli.EXIT_INSUFFICIENT


def test_select_on_corridor_table(tmp_path):
    src = Path(__file__).parent / "data" / "corridor_features.csv"
    out = tmp_path / "o"
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"select": {"domain_max_sensors": 40}}))
    assert _run("select", "--features-csv", src, "--config", cfg, "--out", out) == 0
    printed = {r["corridor"]: float(r["css"]) for r in csv.DictReader(open(src))}
    ranked = list(csv.DictReader(open(out / "ranking.csv")))
    assert [r["corridor"] for r in ranked[:2]] == ["I5-N", "I5-S"]
    assert [r["corridor"] for r in ranked[-2:]] == ["SR142-W", "SR142-E"]
    within = sum(abs(float(r["css"]) - printed[r["corridor"]]) <= 0.02 for r in ranked)
    assert within >= 22
    sel = json.loads((out / "selection.json").read_text())
    assert "SR55-N" in sel["domain_corridors"]
    assert len(sel["fed_clients"]) == 4
    assert not set(sel["fed_clients"]) & set(sel["domain_corridors"])
    print(f"k={sel['k']} domain={sel['domain_corridors']} clients={sel['fed_clients']}")


def _stage_artifacts(out):
    man = json.loads((out / "manifest.json").read_text())
    return {stage: d["artifacts"] for stage, d in man["stages"].items()}


@pytest.fixture(scope="module")
def pipeline_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    cfgp = root / "cfg.json"
    cfgp.write_text(json.dumps(SMALL))
    outs = []
    for name in ("a", "b"):
        out = root / name
        for stage in ("ingest", "select", "gen-prompts", "train-central", "train-fed", "evaluate"):
            assert _run(stage, "--config", cfgp, "--out", out) == 0, stage
        assert _run("evaluate", "--zero-shot", "--config", cfgp, "--out", out) == 0
        outs.append(out)
    return outs, cfgp


def test_manifest_identical_across_runs(pipeline_runs):
    (a, b), _ = pipeline_runs
    ma, mb = _stage_artifacts(a), _stage_artifacts(b)
    assert set(ma) == {"ingest", "select", "gen-prompts", "train-central", "train-fed", "evaluate",
                       "evaluate-zero-shot"}
    assert ma == mb


def test_stage_outputs(pipeline_runs):
    (a, _), _ = pipeline_runs
    losses = list(csv.DictReader(open(a / "loss_central.csv")))
    assert sum(r["phase"] == "pretrain" for r in losses) == 150
    assert sum(r["phase"] == "adapter" for r in losses) == 20
    pre = [float(r["loss"]) for r in losses if r["phase"] == "pretrain"]
    assert np.mean(pre[-10:]) < np.mean(pre[:10])
    assert sorted(p.name for p in (a / "rounds").iterdir()) == ["round_00.json", "round_01.json"]
    rows = list(csv.DictReader(open(a / "report.csv")))
    assert [r["horizon"] for r in rows if r["scope"] == "global"] == ["15", "30", "45", "60", "overall"]
    zs = list(csv.DictReader(open(a / "zero_shot_report.csv")))
    assert {r["scope"] for r in zs} == {"zero-shot-20", "zero-shot-40"}
    sel = json.loads((a / "selection.json").read_text())
    assert sel["zero_shot_corridors"] == ["Z9-N", "Z9-S"]
    assert not set(sel["fed_clients"]) & set(sel["domain_corridors"])


def test_zero_steps_federation_matches_checkpoint(pipeline_runs, tmp_path):
    (a, _), cfgp = pipeline_runs
    out = tmp_path / "z"
    out.mkdir()
    for name in ("flows.csv", "meta.csv", "adjacency.csv", "selection.json", "checkpoint_central.npz"):
        (out / name).write_bytes((a / name).read_bytes())
    (out / "prompts").mkdir()
    for p in (a / "prompts").iterdir():
        (out / "prompts" / p.name).write_bytes(p.read_bytes())
    assert _run("train-fed", "--config", cfgp, "--out", out, "--local-steps", "0") == 0
    fed = adapter.load_checkpoint(out / "model_fed.npz")
    ckpt = adapter.load_checkpoint(out / "checkpoint_central.npz")
    X = np.random.default_rng(0).normal(size=(8, adapter.FEATURE_DIM))
    for x, y in zip(fed.forward(X), ckpt.forward(X)):
        assert np.max(np.abs(x - y)) <= 1e-12


def test_seed_flag_changes_ingest(tmp_path, config):
    assert _run("ingest", "--config", config, "--out", tmp_path / "s1") == 0
    assert _run("ingest", "--config", config, "--out", tmp_path / "s2", "--seed", "8") == 0
    assert (tmp_path / "s1" / "flows.csv").read_bytes() != (tmp_path / "s2" / "flows.csv").read_bytes()


def test_env_output_dir(tmp_path, config):
    env = dict(os.environ, FEDFLOW_OUT=str(tmp_path / "envout"))
    r = subprocess.run([sys.executable, "-m", "fedflow.cli", "ingest", "--config", str(config)], env=env,
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert (tmp_path / "envout" / "manifest.json").exists()


def test_config_validation():
    with pytest.raises(ValueError):
        pipeline.load_config(overrides={"split": {"train_end": "2018-01-01 00:00:00"}})
    cfg = pipeline.load_config(overrides={"fed": {"rounds": 3}})
    assert cfg["fed"]["rounds"] == 3 and cfg["fed"]["local_steps"] == 200
