import csv
import json
from dataclasses import replace

import numpy as np
import pytest

from microgrid_drl import rl
from microgrid_drl.cli import main, pearson, sign_test
from microgrid_drl.config import WORKERS_ENV, SchemeConfig
from microgrid_drl.data import SynthConfig
from microgrid_drl.env import EnvParams
from microgrid_drl.rl import LOG_HEADER, PpoConfig, TrainingDivergence

SMALL = """
[ppo]
iterations = 4
workers = 2
eval_every = 2
[forecast]
epochs = 4
hidden = 4
[synth]
days = 15
"""


@pytest.fixture
def small_cfg(tmp_path):
    path = tmp_path / "small.ini"
    path.write_text(SMALL)
    return str(path)


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_config_round_trip_is_lossless():
    cfg = SchemeConfig(scheme="with-prediction", k=1, seed=9, out="x",
                       env=EnvParams(capacity=1500.0, b0=0.25), ppo=PpoConfig(mlp_hidden=(32, 16), normalize_advantages=False),
                       synth=replace(SynthConfig(), demand_harmonics=((1.5, 2.0),), peak_hours=(7, 20)))
    back = SchemeConfig.from_ini(cfg.to_ini())
    assert back == cfg and back.digest() == cfg.digest()


def test_config_uses_table_keys():
    text = SchemeConfig().to_ini()
    for key in ("lambda_1 = 0.013", "lambda_2 = 0.005", "clip_epsilon = 0.2", "update_epochs = 3",
                "gamma = 0.95", "actor_lr = 0.0003", "critic_lr = 0.001", "workers = 10", "b0_eval = 0.5"):
        assert key in text


def test_config_rejects_unknown_keys_and_sections():
    with pytest.raises(ValueError, match="unknown key"):
        SchemeConfig.from_ini("[ppo]\ngama = 0.9\n")
    with pytest.raises(ValueError, match="sections"):
        SchemeConfig.from_ini("[extra]\na = 1\n")
    with pytest.raises(ValueError):
        SchemeConfig.from_ini("[scheme]\nscheme = magic\n")


def test_worker_override(monkeypatch):
    monkeypatch.setenv(WORKERS_ENV, "3")
    assert SchemeConfig().with_worker_override().ppo.workers == 3
    monkeypatch.delenv(WORKERS_ENV)
    assert SchemeConfig().with_worker_override().ppo.workers == 10


def test_pearson_and_sign_test():
    assert pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
    assert pearson([1, 2, 3], [5, 5, 5]) == 0.0
    assert sign_test(5, 0) == pytest.approx(0.0625)
    assert sign_test(0, 0) == 1.0


def test_synth_year(tmp_path, capsys):
    assert main(["synth", "--days", "365", "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    rows = _rows(tmp_path / "a" / "data.csv")
    assert len(rows) == 8761 and rows[0] == ["timestamp", "generation_kw", "demand_kw", "price"]
    assert "mean" in capsys.readouterr().out
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert {"config", "seed", "code_version", "wall_time_s"} <= set(manifest)
    assert main(["synth", "--days", "365", "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "data.csv").read_bytes() == (tmp_path / "b" / "data.csv").read_bytes()


def test_synth_rejects_one_day(tmp_path):
    assert main(["synth", "--days", "1", "--out", str(tmp_path)]) != 0


def test_train_forecaster_missing_dataset(tmp_path):
    assert main(["train-forecaster", "--data", str(tmp_path / "nope.csv"), "--out", str(tmp_path)]) != 0


def test_train_forecaster_outputs(tmp_path, small_cfg, capsys):
    out = tmp_path / "f"
    assert main(["train-forecaster", "--config", small_cfg, "--out", str(out)]) == 0
    report = _rows(out / "forecast_report.csv")
    assert len(report) == 7 and {r[0] for r in report[1:]} == {"generation", "demand", "price"}
    curves = _rows(out / "loss_curves.csv")
    assert len(curves) == 5 and len(curves[0]) == 7
    assert (out / "forecaster.json").exists() and (out / "manifest.json").exists()
    assert "1-step MAPE" in capsys.readouterr().out


def test_train_policy_with_prediction_needs_forecaster(tmp_path, small_cfg):
    assert main(["train-policy", "--config", small_cfg, "--scheme", "with-prediction",
                 "--out", str(tmp_path)]) != 0
    assert main(["train-policy", "--config", small_cfg, "--scheme", "with-prediction",
                 "--forecaster", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) != 0


def test_train_policy_divergence_exits_nonzero_and_keeps_checkpoint(tmp_path, small_cfg, monkeypatch):
    real = rl.ppo_update
    calls = {"n": 0}

    def flaky(*args):
        calls["n"] += 1
        if calls["n"] == 3:
            raise TrainingDivergence("injected NaN")
        return real(*args)

    monkeypatch.setattr(rl, "ppo_update", flaky)
    out = tmp_path / "p"
    assert main(["train-policy", "--config", small_cfg, "--out", str(out)]) != 0
    assert (out / "policy.json").exists()
    assert len(_rows(out / "training_log.csv")) == 3
    assert "diverged" in json.loads((out / "manifest.json").read_text())


@pytest.fixture
def trained(tmp_path, small_cfg):
    out = tmp_path / "fc"
    assert main(["train-forecaster", "--config", small_cfg, "--out", str(out)]) == 0
    runs = {}
    for scheme in ("with-prediction", "without-prediction"):
        p = tmp_path / scheme
        args = ["train-policy", "--config", small_cfg, "--scheme", scheme, "--out", str(p)]
        if scheme == "with-prediction":
            args += ["--forecaster", str(out / "forecaster.json")]
        assert main(args) == 0
        runs[scheme] = p
    return runs


def test_train_policy_outputs(trained):
    for run in trained.values():
        log = _rows(run / "training_log.csv")
        assert tuple(log[0]) == LOG_HEADER and len(log) == 5
        assert log[2][-1] != "" and log[1][-1] == ""
        meta = json.loads((run / "policy.json").read_text())["meta"]
        assert "config" in meta and meta["horizon"] == 24
        assert "grad_clip_norm" in json.loads((run / "manifest.json").read_text())


@pytest.mark.parametrize("scheme", ["with-prediction", "without-prediction"])
def test_evaluate_outputs(trained, tmp_path, scheme):
    out = tmp_path / f"eval-{scheme}"
    assert main(["evaluate", "--checkpoint", str(trained[scheme] / "policy.json"), "--episodes", "2",
                 "--out", str(out)]) == 0
    report = json.loads((out / "evaluation.json").read_text())
    assert report["episodes"] == 2 and len(report["episode_rewards"]) == 2
    assert -1.0 <= report["action_price_correlation"] <= 1.0
    trace = _rows(out / "trace.csv")
    assert len(trace) == 1 + 2 * 24
    counts = {}
    for row in trace[1:]:
        counts[row[0]] = counts.get(row[0], 0) + 1
    assert set(counts.values()) == {24}


def test_evaluate_horizon_mismatch(trained, tmp_path):
    cfg = tmp_path / "h.ini"
    cfg.write_text(SMALL + "[env]\nhorizon = 12\n")
    assert main(["evaluate", "--checkpoint", str(trained["without-prediction"] / "policy.json"),
                 "--config", str(cfg), "--out", str(tmp_path / "e")]) != 0


def test_compare_needs_two_seeds(tmp_path, small_cfg):
    assert main(["compare", "--config", small_cfg, "--seeds", "1", "--out", str(tmp_path)]) != 0


def test_compare_rejects_mismatched_datasets(tmp_path, small_cfg):
    other = tmp_path / "other.ini"
    other.write_text(SMALL.replace("days = 15", "days = 16"))
    assert main(["compare", "--config", small_cfg, "--config-b", str(other), "--seeds", "2",
                 "--out", str(tmp_path)]) != 0


def test_compare_self_is_null(tmp_path, small_cfg, capsys):
    out = tmp_path / "c"
    assert main(["compare", "--config", small_cfg, "--seeds", "2", "--schemes", "without-prediction",
                 "without-prediction", "--out", str(out)]) == 0
    result = json.loads((out / "comparison.json").read_text())
    assert result["ties"] == 2 and result["sign_test_p"] > 0.05
    rows = _rows(out / "comparison.csv")
    assert len(rows) == 3 and all(r[-1] == "tie" for r in rows[1:])
    curves = _rows(out / "curves.csv")
    assert len(curves) == 1 + 2 * 2 * 4
    assert "winner" in capsys.readouterr().out


def test_compare_declares_winner_per_seed(tmp_path, small_cfg):
    out = tmp_path / "c"
    assert main(["compare", "--config", small_cfg, "--seeds", "2", "--out", str(out)]) == 0
    for row in _rows(out / "comparison.csv")[1:]:
        assert row[-1] in ("a", "b", "tie")
