import dataclasses
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from backtime import pipeline
from backtime.cli import EXIT_CODES, default_run_dir, main
from backtime.config import ExperimentConfig, apply_overrides, dump_config, load_config
from backtime.data import load_csv, load_mask
from backtime.errors import ConfigError
from backtime.io import load_plan, load_triggers, read_records

ROOT = Path(__file__).resolve().parents[1]
FAST = [
    "dataset.num_variables=4", "dataset.span=600", "schedule.warmup_epochs=1",
    "schedule.train_epochs=2", "schedule.surrogate_arch=mlp", "model.epochs=2",
    "eval.attack_points=5", "eval.detector_epochs=2", "eval.groups=3",
]


def fast_args(*extra):
    out = []
    for item in FAST + list(extra):
        out += ["--set", item]
    return out


def test_defaults_validate_and_match_shipped_yaml():
    cfg = ExperimentConfig().validate()
    assert load_config(ROOT / "configs" / "synthetic.yaml") == cfg


def test_dump_and_reload(tmp_path):
    cfg = load_config(None, FAST)
    dump_config(cfg, tmp_path / "c.yaml")
    back = load_config(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash()


def test_overrides_parse_yaml_values():
    raw = apply_overrides({}, ["attack.norm_weight=0.5", "model.victims=[mlp, temporal_conv]"])
    assert raw == {"attack": {"norm_weight": 0.5}, "model": {"victims": ["mlp", "temporal_conv"]}}
    with pytest.raises(ConfigError):
        apply_overrides({}, ["no_equals_sign"])


def test_unknown_keys_rejected():
    with pytest.raises(ConfigError) as err:
        ExperimentConfig.from_dict({"attack": {"trigger_length": 4}, "extra": 1})
    assert set(err.value.fields) == {"attack.trigger_length", "extra"}


def test_invalid_config_lists_every_field():
    with pytest.raises(ConfigError) as err:
        load_config(None, ["dataset.noise=x", "attack.eta=cube", "model.epochs=abc",
                           "schedule.train_epochs=0"])
    assert set(err.value.fields) >= {"dataset.noise", "attack.eta", "model.epochs",
                                     "schedule.train_epochs"}


def test_poison_hash_ignores_eval_section():
    a = load_config(None, ["eval.baselines=[random]"])
    b = load_config(None, ["eval.baselines=[inverse]"])
    assert a.poison_hash() == b.poison_hash() and a.hash() != b.hash()
    assert default_run_dir(a) == default_run_dir(b)


def test_unknown_subcommand_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "backtime.cli", "explode"],
                          capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr


def test_invalid_config_exit_code(capsys, tmp_path):
    code = main(["poison", "--run-dir", str(tmp_path), "--set", "attack.temporal_rate=3"])
    assert code == EXIT_CODES["config"]
    assert "attack.temporal_rate" in capsys.readouterr().err


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["poison", "--run-dir", str(out)] + fast_args()) == 0
    return out


def test_poison_artifact_contract(run_dir):
    for name in ("config.yaml", "poisoned.csv", "poison_mask.csv", "plan.json", "triggers.json",
                 "generator.npz", "graph_edges.txt", "train_log.jsonl", "poison_metrics.jsonl",
                 "trigger_pattern.png"):
        assert (run_dir / name).is_file(), name
    ds = load_csv(run_dir / "poisoned.csv")
    mask = load_mask(run_dir / "poison_mask.csv")
    plan = load_plan(run_dir / "plan.json")
    trig = load_triggers(run_dir / "triggers.json")
    assert mask.shape == ds.values.shape
    assert mask.sum() == len(plan.timestamps) * 11 * len(plan.target_variables)
    assert trig.shape == (len(plan.timestamps), 4, len(plan.target_variables))
    assert np.abs(trig).max() <= 0.2
    assert len(read_records(run_dir / "train_log.jsonl")) == 2


def test_eval_and_report_average(run_dir, capsys):
    assert main(["eval", "--run-dir", str(run_dir)] + fast_args()) == 0
    assert (run_dir / "metrics.txt").is_file()
    assert (run_dir / "prediction_example.png").is_file()
    records = read_records(run_dir / "metrics.jsonl")
    assert {r["strategy"] for r in records} == {"clean", "backtime", "random"}
    capsys.readouterr()
    assert main(["report", "--run-dir", str(run_dir)]) == 0
    text = capsys.readouterr().out
    for strategy in ("clean", "backtime", "random"):
        rows = [r for r in records if r["strategy"] == strategy]
        models = [r for r in rows if r["name"] != "average"]
        avg = next(r for r in rows if r["name"] == "average")
        for key in ("mae_clean", "rmse_clean", "mae_attack", "rmse_attack"):
            assert abs(avg[key] - np.mean([m[key] for m in models])) < 1e-12
        assert f"[{strategy}]" in text
    for r in records:
        assert r["mae_clean"] <= r["rmse_clean"] and r["mae_attack"] <= r["rmse_attack"]


def test_train_victim_and_stealth(run_dir):
    assert main(["train-victim", "--run-dir", str(run_dir)] + fast_args()) == 0
    assert main(["train-victim", "--clean", "--run-dir", str(run_dir)] + fast_args()) == 0
    assert set(pipeline.load_victims(run_dir, "poisoned")) == {"mlp"}
    assert set(pipeline.load_victims(run_dir, "clean")) == {"mlp"}
    assert main(["stealth", "--run-dir", str(run_dir)] + fast_args()) == 0
    st = json.loads((run_dir / "stealth.json").read_text())
    assert 0 <= st["auc"] <= 1


def test_experiment_fig2(tmp_path):
    assert main(["experiment-fig2", "--run-dir", str(tmp_path)] + fast_args()) == 0
    body = json.loads((tmp_path / "fig2.json").read_text())
    assert len(body["mae_difference"]) == 3
    assert (tmp_path / "fig2.png").is_file()


def test_report_without_eval(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path)]) == EXIT_CODES["config"]


def test_sweep_single_value_equals_standalone(tmp_path):
    cfg = load_config(None, FAST)
    rows = pipeline.ablation_sweep("temporal_rate", [0.03], cfg, tmp_path)
    alone = pipeline.sweep_row(dataclasses.replace(
        cfg, attack=dataclasses.replace(cfg.attack, temporal_rate=0.03)))
    assert len(rows) == 1 and rows[0]["status"] == "ok"
    assert {k: rows[0][k] for k in alone} == alone
    assert (tmp_path / "sweep.txt").is_file() and (tmp_path / "sweep.png").is_file()


def test_sweep_records_failures_and_continues():
    cfg = load_config(None, FAST)
    rows = pipeline.ablation_sweep("spatial_rate", [1.0, 0.5], cfg)
    assert [r["status"] for r in rows] == ["ok", "ok"]
    bad = dataclasses.replace(cfg, attack=dataclasses.replace(cfg.attack, trigger_len=12))
    rows = pipeline.ablation_sweep("temporal_rate", [0.03], bad)
    assert rows[0]["status"] == "failed" and "error" in rows[0]
    with pytest.raises(ConfigError):
        pipeline.ablation_sweep("temporal_rate", [1.5], cfg)
