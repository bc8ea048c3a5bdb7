"""Tests for TOML config loading, overrides and the config hash."""

from __future__ import annotations

from pathlib import Path

import pytest

from core.config import ExperimentConfig, default_output_root, load_config, parse_config
from core.errors import ConfigError

REPO_ROOT = Path(__file__).resolve().parents[1]


def test_defaults_match_documented_values() -> None:
    config = ExperimentConfig()
    assert (config.weights.lambda1, config.weights.lambda2, config.weights.alpha, config.weights.beta) == (10, 10, 5, 5)
    assert config.vseg.optimizer.name == "rmsprop"
    assert config.vseg.optimizer.lr == 1e-5
    assert config.transpro.optimizer.name == "adam"
    assert config.transpro.optimizer.betas == (0.5, 0.999)
    assert config.evaluation.gamma == 0.1
    assert config.evaluation.patch_size == 16
    assert config.models.dpre.conditional


def test_shipped_configs_load() -> None:
    desk = load_config(REPO_ROOT / "configs" / "desk.toml")
    smoke = load_config(REPO_ROOT / "configs" / "smoke.toml")
    assert desk.dataset.phantom.shape == (64, 64, 32)
    assert (smoke.dataset.n_train, smoke.dataset.n_val, smoke.dataset.n_test) == (8, 2, 4)
    assert (smoke.vseg.epochs, smoke.hcg.epochs, smoke.transpro.epochs) == (5, 5, 20)


def test_unknown_key_is_rejected(tmp_path) -> None:
    path = tmp_path / "bad.toml"
    path.write_text("[weights]\nalpha = 5.0\ngamma_typo = 1.0\n")
    with pytest.raises(ConfigError, match="gamma_typo"):
        load_config(path)


def test_negative_weight_is_rejected(tmp_path) -> None:
    with pytest.raises(ConfigError):
        parse_config({"weights": {"beta": -1.0}})


def test_malformed_toml_and_missing_file(tmp_path) -> None:
    path = tmp_path / "broken.toml"
    path.write_text("[run\nseed = 1\n")
    with pytest.raises(ConfigError, match="Malformed TOML"):
        load_config(path)
    with pytest.raises(FileNotFoundError):
        load_config(tmp_path / "nope.toml")


def test_dpre_must_be_conditional() -> None:
    with pytest.raises(ConfigError, match="conditional"):
        parse_config({"models": {"dpre": {"dims": 2, "conditional": False}}})


def test_hash_ignores_name_and_output_root(tmp_path) -> None:
    base = ExperimentConfig()
    moved = base.with_overrides(output_root=tmp_path / "elsewhere", name="renamed")
    assert moved.config_hash() == base.config_hash()
    assert base.with_overrides(seed=3).config_hash() != base.config_hash()


def test_overrides_apply_before_hashing(tmp_path) -> None:
    path = tmp_path / "run.toml"
    path.write_text("[run]\nseed = 1\nname = \"exp\"\n")
    config = load_config(path, seed=9, output_root=tmp_path / "out", dataset=tmp_path / "ds")
    assert config.run.seed == 9
    assert config.run_dir() == tmp_path / "out" / "exp"
    assert config.dataset.path == tmp_path / "ds"
    assert config.config_hash() == parse_config({"run": {"seed": 9}, "dataset": {"path": str(tmp_path / "ds")}}).config_hash()


def test_output_root_from_environment(tmp_path, monkeypatch) -> None:
    monkeypatch.setenv("TRANSPRO_OUTPUT_ROOT", str(tmp_path / "env_runs"))
    assert default_output_root() == tmp_path / "env_runs"
    assert ExperimentConfig().run_dir() == tmp_path / "env_runs" / "desk"
    assert ExperimentConfig().resolved()["run"]["output_root"] == (tmp_path / "env_runs").as_posix()


def test_loss_switches_accept_known_values_only() -> None:
    config = parse_config({"switches": {"vpg_space": "probabilities", "hcg_loss": "mse"}})
    assert (config.switches.vpg_space, config.switches.hcg_loss) == ("probabilities", "mse")
    assert config.config_hash() != ExperimentConfig().config_hash()
    with pytest.raises(ConfigError):
        parse_config({"switches": {"hcg_loss": "huber"}})


def test_unscorable_phantom_shape_is_rejected_at_load() -> None:
    with pytest.raises(ConfigError, match="too small to score"):
        parse_config({"dataset": {"phantom": {"shape": [16, 16, 8]}}})
    assert parse_config({"dataset": {"phantom": {"shape": [16, 16, 11]}}}).dataset.phantom.shape == (16, 16, 11)
