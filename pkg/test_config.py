"""
Tests for run configuration loading, settings and the shared training helpers
"""

import json
from pathlib import Path

import numpy as np
import pytest
from pydantic import ValidationError

from app.core.config import Settings, config_hash, load_config
from app.models.config import RunConfig
from app.services.experiments import checkpoint_path, parse_sweep
from app.services.training import check_finite_loss, smoothed, write_loss_curve
from app.utils.exceptions import ConfigurationException, DivergenceException


def test_defaults():
    cfg = load_config()
    assert cfg == RunConfig()
    assert cfg.schedule.T == 100
    assert cfg.schedule.lambda2 == 0.01
    assert cfg.sampler.rescale_alpha == 0.5
    assert cfg.sampler.skip_beta == 3
    assert cfg.training.pinv.alpha_schedule == [0.0, 0.2]
    assert cfg.phantoms.size == cfg.geometry.size


def test_file_then_overrides(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"experiment": "desk", "geometry": {"size": 32}, "sampler": {"seed": 4}}))
    cfg = load_config(path, ["sampler.seed=9", "schedule.kind=linear", "evaluation.theta_miss_list=[60, 120]"])
    assert cfg.experiment == "desk"
    assert cfg.geometry.size == 32
    assert cfg.phantoms.size == 32
    assert cfg.sampler.seed == 9
    assert cfg.schedule.kind == "linear"
    assert cfg.evaluation.theta_miss_list == [60.0, 120.0]


@pytest.mark.parametrize(
    "overrides,code",
    [
        (["sampler.temperature=2"], "UNKNOWN_KEY"),
        (["geometry.size.x=2"], "UNKNOWN_KEY"),
        (["no-equals-sign"], "BAD_OVERRIDE"),
        (["sampler.skip_beta=0"], "CONFIG_INVALID"),
        (["sampler.T=50"], "CONFIG_INVALID"),
        (["dataset.n_val=64"], "CONFIG_INVALID"),
        (["training.score.emb_dim=7"], "CONFIG_INVALID"),
        (["experiment=has space"], "CONFIG_INVALID"),
    ],
)
def test_override_errors(overrides, code):
    with pytest.raises(ConfigurationException) as exc:
        load_config(None, overrides)
    assert exc.value.error_code == code
    assert exc.value.exit_code == 2


def test_sampler_t_may_match_schedule():
    cfg = load_config(None, ["schedule.T=50", "sampler.T=50"])
    assert cfg.sampler.T == cfg.schedule.T == 50


def test_file_errors(tmp_path):
    with pytest.raises(ConfigurationException) as exc:
        load_config(tmp_path / "missing.json")
    assert exc.value.error_code == "CONFIG_UNREADABLE"
    bad = tmp_path / "bad.json"
    bad.write_text("{nope")
    with pytest.raises(ConfigurationException) as exc:
        load_config(bad)
    assert exc.value.error_code == "CONFIG_JSON"
    listed = tmp_path / "list.json"
    listed.write_text("[1, 2]")
    with pytest.raises(ConfigurationException) as exc:
        load_config(listed)
    assert exc.value.error_code == "CONFIG_JSON"


def test_config_hash_covers_config_and_inputs(tmp_path):
    cfg = RunConfig()
    first = tmp_path / "a.bin"
    first.write_bytes(b"abc")
    base = config_hash(cfg)
    assert base == config_hash(RunConfig())
    assert base != config_hash(cfg.model_copy(update={"seed": 1}))
    with_input = config_hash(cfg, [first])
    assert with_input != base
    first.write_bytes(b"abd")
    assert config_hash(cfg, [first]) != with_input


def test_settings_validate_log_level(monkeypatch):
    assert Settings(log_level="debug").log_level == "DEBUG"
    with pytest.raises(ValidationError):
        Settings(log_level="chatty")
    monkeypatch.setenv("RNSDE_THREADS", "3")
    assert Settings().worker_count == 3


def test_parse_sweep():
    assert parse_sweep("T=50,100,200") == ("T", [50, 100, 200])
    assert parse_sweep("rescale_alpha=0.1,0.5") == ("rescale_alpha", [0.1, 0.5])
    name, values = parse_sweep("mu")
    assert name == "mu"
    assert len(values) == 4
    for sweep in ("lambda=1,2", "T=", "T=a,b"):
        with pytest.raises(ConfigurationException) as exc:
            parse_sweep(sweep)
        assert exc.value.error_code == "BAD_SWEEP"


def test_checkpoint_naming(tmp_path):
    cfg = load_config(None, [f"paths.runs_dir={tmp_path}", "experiment=exp"])
    root = Path(tmp_path) / "exp" / "checkpoints"
    assert checkpoint_path(cfg, "pinv", 90.0) == root / "pinv_miss90.rnt"
    assert checkpoint_path(cfg, "score", 67.5) == root / "score_miss67.5.rnt"
    assert checkpoint_path(cfg, "score", 90.0, "restorer") == root / "score_restorer_miss90.rnt"
    assert checkpoint_path(cfg, "restorer", 120.0, "restorer") == root / "restorer_miss120.rnt"


def test_check_finite_loss():
    check_finite_loss(1.5, 3, "score", [1.0, 2.0])
    with pytest.raises(DivergenceException) as exc:
        check_finite_loss(float("nan"), 7, "pinv", list(range(20)), alpha=0.2)
    assert exc.value.error_code == "TRAINING_DIVERGED"
    assert exc.value.exit_code == 4
    assert exc.value.details["recent_losses"] == [float(v) for v in range(10, 20)]
    assert exc.value.details["alpha"] == 0.2


def test_smoothed():
    np.testing.assert_allclose(smoothed([1, 3, 5, 7, 100], window=2), [2.0, 6.0])
    np.testing.assert_allclose(smoothed([1, 2, 3], window=10), [2.0])
    assert len(smoothed([], window=4)) == 0


def test_write_loss_curve(tmp_path):
    path = tmp_path / "nested" / "loss_curve.csv"
    write_loss_curve(path, [0.5, 0.25], {"l1": [0.4, 0.2], "l2": [0.0, 0.1]})
    lines = path.read_text().splitlines()
    assert lines[0] == "step,loss,l1,l2"
    assert lines[1] == "0,0.5,0.4,0.0"
    assert lines[2] == "1,0.25,0.2,0.1"
