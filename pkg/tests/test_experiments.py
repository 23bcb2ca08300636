import dataclasses
import json

import numpy as np
import pandas as pd
import pytest

from lkis._utils import ConfigError, DegeneracyError, ExperimentError
from lkis.harness import experiments
from lkis.harness.experiments import ExperimentConfig, ExperimentKind, load_config, load_presets, run


def _tiny_eig_recovery(out, **extra):
    return ExperimentConfig.from_dict({
        "kind": "eig_recovery",
        "output_dir": str(out),
        "episodes": 4,
        "steps": 20,
        "hyper": {"k": 1, "n": 4, "alpha": 0.01},
        "train": {"batch_size": 20, "max_epochs": 3, "lr": 0.003},
        **extra,
    })


def _tiny_detection(out, **extra):
    return ExperimentConfig.from_dict({
        "kind": "detection",
        "output_dir": str(out),
        "events": {"steps": 600, "n_events": 3, "min_gap": 100},
        "splits": [0.5, 0.0, 0.0],
        "tolerance_window": 2,
        "hankel_delays": [4],
        "hyper": {"k": 4, "n": 6},
        "train": {"batch_size": 100, "max_epochs": 2},
        **extra,
    })


def test_every_preset_is_a_valid_config():
    presets = load_presets()
    assert {ExperimentKind(p["kind"]) for p in presets.values()} == set(ExperimentKind)
    for name in presets:
        load_config(preset=name).validate()


def test_config_precedence(tmp_path):
    path = tmp_path / "exp.yaml"
    path.write_text("seed: 5\nsteps: 30\nhyper: {n: 6}\n")
    cfg = load_config(path, preset="eig_recovery", overrides={"seed": 7, "output_dir": None})
    assert cfg.seed == 7
    assert cfg.steps == 30
    assert cfg.hyper == {"k": 2, "n": 6, "alpha": 0.01, "depth": 2, "hidden": 16}
    assert cfg.output_dir == "runs/eig_recovery"
    assert cfg.train_config().seed == 7


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(preset="no_such_preset")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.yaml")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "prediction", "epochs": 3})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "forecasting"})
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "basins", "system": "lorenz"}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "prediction", "system": "pendulum"}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "prediction", "splits": [0.8, 0.3, 0.0]}).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"kind": "prediction", "hyper": {"depth": -1, "width": 3}}).validate()


def test_missing_data_file_writes_nothing(tmp_path):
    out = tmp_path / "run"
    cfg = ExperimentConfig.from_dict({"kind": "prediction", "output_dir": str(out),
                                      "data_path": str(tmp_path / "nope.csv")})
    with pytest.raises(ConfigError):
        run(cfg)
    assert not out.exists()


def test_eig_recovery_run(tmp_path):
    report = run(_tiny_eig_recovery(tmp_path / "a"))
    assert report.metrics["edmd_max_error"] < 1e-6
    assert all(np.isfinite(v) for v in report.metrics.values())
    out = tmp_path / "a"
    for name in ("manifest.json", "report.json", "loss.csv", "model.json", "eigenvalues_edmd.csv",
                 "eigenvalues_lkis.csv", "dmd_lkis.json"):
        assert (out / name).is_file(), name
    doc = json.loads((out / "report.json").read_text())
    assert doc["format"] == "lkis.report" and doc["config_hash"] == report.config_hash
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config"]["kind"] == "eig_recovery" and manifest["seed"] == 0


def test_identical_configs_give_identical_results(tmp_path):
    a = run(_tiny_eig_recovery(tmp_path / "a", seed=3))
    b = run(_tiny_eig_recovery(tmp_path / "b", seed=3))
    assert a.config_hash == b.config_hash
    assert a.metrics == b.metrics
    assert (tmp_path / "a" / "model.json").read_text() == (tmp_path / "b" / "model.json").read_text()


def test_seed_changes_the_hash(tmp_path):
    a = run(_tiny_eig_recovery(tmp_path / "a", seed=1))
    b = run(_tiny_eig_recovery(tmp_path / "b", seed=2))
    assert a.config_hash != b.config_hash


def test_detection_on_synthetic_collapses(tmp_path):
    report = run(_tiny_detection(tmp_path))
    assert report.metrics["n_events"] == 3
    assert 0.0 <= report.metrics["hankel_auc"] <= 1.0
    scores = pd.read_csv(tmp_path / "scores.csv", comment="#")
    assert list(scores.columns) == ["t", "score", "score_real", "label"]
    assert len(scores) == 600 and scores["label"].sum() == 3


def test_failed_stage_is_reported(tmp_path):
    data = tmp_path / "short.csv"
    data.write_text("# dt: 1\n" + "\n".join(str(np.sin(i)) for i in range(5)) + "\n")
    out = tmp_path / "run"
    with pytest.raises(ExperimentError) as info:
        run(_tiny_detection(out, data_path=str(data)))
    assert info.value.stage == "train"
    error = json.loads((out / "error.json").read_text())
    assert error["stage"] == "train"
    assert "manifest.json" in error["artifacts"]


def test_prediction_run(tmp_path):
    cfg = ExperimentConfig.from_dict({
        "kind": "prediction",
        "output_dir": str(tmp_path),
        "system": "lorenz",
        "observed": [0],
        "x0": [1.0, 1.0, 1.0],
        "steps": 400,
        "discard": 100,
        "splits": [0.5, 0.25, 0.25],
        "horizon": 5,
        "hankel_delays": [2, 3],
        "hyper": {"k": 3, "n": 5},
        "train": {"batch_size": 50, "max_epochs": 2},
    })
    report = run(cfg)
    assert report.metrics["hankel_delay"] in (2.0, 3.0)
    rmse = pd.read_csv(tmp_path / "rmse.csv", comment="#")
    assert list(rmse.columns) == ["horizon", "lkis", "hankel", "persistence"]
    assert rmse["horizon"].tolist() == [1, 2, 3, 4, 5]
    assert report.metrics["rmse_hankel_h1"] < report.metrics["rmse_persistence_h1"]


def test_prediction_needs_validation_and_test(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "prediction", "output_dir": str(tmp_path), "x0": [1.0, 1.0, 1.0],
                                      "steps": 100, "hyper": {"k": 2, "n": 3}, "train": {"max_epochs": 1}})
    with pytest.raises(ExperimentError) as info:
        run(cfg)
    assert info.value.stage == "split"


def _tiny_prediction(out, delays):
    return ExperimentConfig.from_dict({
        "kind": "prediction",
        "output_dir": str(out),
        "system": "lorenz",
        "observed": [0],
        "x0": [1.0, 1.0, 1.0],
        "steps": 400,
        "discard": 100,
        "splits": [0.5, 0.25, 0.25],
        "horizon": 5,
        "hankel_delays": delays,
        "hyper": {"k": 3, "n": 5},
        "train": {"batch_size": 50, "max_epochs": 2},
    })


def _failing_delay(monkeypatch, bad):
    real = experiments.hankel_dmd

    def hankel_dmd(data, delay):
        if delay in bad:
            raise DegeneracyError(f"eigenvalues of delay {delay} coincide", pair=(0, 1))
        return real(data, delay)

    monkeypatch.setattr(experiments, "hankel_dmd", hankel_dmd)


def test_degenerate_hankel_delay_is_skipped(tmp_path, monkeypatch):
    _failing_delay(monkeypatch, bad={2})
    report = run(_tiny_prediction(tmp_path, [2, 3]))
    assert report.metrics["hankel_delay"] == 3.0


def test_every_hankel_delay_degenerate(tmp_path, monkeypatch):
    _failing_delay(monkeypatch, bad={2, 3})
    with pytest.raises(ExperimentError) as info:
        run(_tiny_prediction(tmp_path, [2, 3]))
    assert info.value.stage == "fit"


def test_rank_deficient_hankel_delay_is_usable(tmp_path):
    # a damped sinusoid has rank 2, so 6 lags leave 4 zero eigenvalues
    data = tmp_path / "spiral.csv"
    t = np.arange(400)
    data.write_text("# dt: 1\n" + "\n".join("%.17g" % v for v in 0.995**t * np.cos(0.3 * t)) + "\n")
    cfg = _tiny_prediction(tmp_path / "run", [6])
    report = run(dataclasses.replace(cfg, data_path=str(data), system=None))
    assert report.metrics["hankel_delay"] == 6.0
    assert report.metrics["rmse_hankel_h5"] < 1e-8
