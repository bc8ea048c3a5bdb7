"""Shared pytest fixtures: tiny configs and on-disk phantom datasets."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from core.config import ExperimentConfig, parse_config
from core.phantom import PhantomConfig, generate_dataset

TINY_SHAPE = (16, 16, 16)


@pytest.fixture(autouse=True)
def isolated_output_root(tmp_path, monkeypatch):
    """Keep anything that falls back to the default output root inside the test's tmp dir."""
    monkeypatch.setenv("TRANSPRO_OUTPUT_ROOT", str(tmp_path / "default_runs"))
    yield


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


def tiny_phantom_config() -> PhantomConfig:
    return PhantomConfig(
        shape=TINY_SHAPE,
        n_trees=2,
        max_steps=10,
        radius_start=1.2,
        min_radius=0.5,
        target_density_band=(0.0, 1.0),
    )


def tiny_config_dict(tmp_path: Path, **sections) -> dict:
    data = {
        "run": {"name": "tiny", "output_root": str(tmp_path / "runs"), "seed": 0},
        "dataset": {
            "path": str(tmp_path / "data"),
            "n_train": 4,
            "n_val": 2,
            "n_test": 2,
            "phantom": tiny_phantom_config().model_dump(mode="json"),
        },
        "models": {
            "g3d": {"dims": 3, "base_channels": 4, "n_downsamples": 2},
            "d3d": {"dims": 3, "base_channels": 4, "n_strided_layers": 2},
            "d2d": {"dims": 2, "base_channels": 4, "n_strided_layers": 2},
            "gpre": {"dims": 2, "base_channels": 4, "n_downsamples": 2},
            "dpre": {"dims": 2, "base_channels": 4, "n_strided_layers": 2, "conditional": True},
            "vseg": {"base_channels": 4, "n_downsamples": 2},
        },
        "vseg": {"epochs": 3, "batch_size": 2, "crop_size": 8, "optimizer": {"name": "rmsprop", "lr": 1e-3}},
        "hcg": {"epochs": 3, "batch_size": 2},
        "transpro": {"epochs": 3, "batch_size": 1},
        "evaluation": {"patch_size": 4, "triptychs": False},
        "ablation": {"seeds": [0], "weight_values": [1.0]},
    }
    for key, value in sections.items():
        data[key] = {**data.get(key, {}), **value}
    return data


@pytest.fixture
def tiny_config(tmp_path) -> ExperimentConfig:
    return parse_config(tiny_config_dict(tmp_path))


@pytest.fixture
def tiny_dataset(tiny_config) -> Path:
    """A generated 4/2/2 phantom dataset matching ``tiny_config``."""
    ds = tiny_config.dataset
    generate_dataset(ds.n_train, ds.n_val, ds.n_test, tiny_config.run.seed, ds.phantom, ds.path)
    return ds.path
