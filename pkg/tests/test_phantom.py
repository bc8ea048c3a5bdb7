"""Tests for the procedural phantom generator and dataset layout."""

from __future__ import annotations

import json

import numpy as np
import pytest

from core.errors import EmptySetError, PhantomRetryError
from core.phantom import (
    Centerline,
    PhantomConfig,
    PhantomDataset,
    generate_dataset,
    generate_sample,
    grow_vessel_tree,
    layer_profile,
    rasterize_vessels,
    shadow_mask,
    synth_oct_volume,
    synth_octa_volume,
)
from core.volumes import MaskSource

from .conftest import tiny_phantom_config


def _distance_oracle(p0, p1, radius, shape) -> np.ndarray:
    grid = np.zeros(shape, dtype=np.uint8)
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    d = p1 - p0
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                q = np.array([i, j, k], float)
                t = min(max(float((q - p0) @ d) / float(d @ d), 0.0), 1.0)
                if np.linalg.norm(q - (p0 + t * d)) <= radius:
                    grid[i, j, k] = 1
    return grid


def test_no_trees_gives_empty_set_and_empty_grid() -> None:
    config = PhantomConfig(n_trees=0, shape=(8, 8, 8))
    trees = grow_vessel_tree(5, config)
    assert trees == []
    assert rasterize_vessels(trees, config.shape).sum() == 0


def test_tree_growth_is_deterministic() -> None:
    config = PhantomConfig()
    a, b = grow_vessel_tree(11, config), grow_vessel_tree(11, config)
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert np.array_equal(x.nodes, y.nodes)
        assert np.array_equal(x.radii, y.radii)


def test_tree_nodes_stay_in_bounds() -> None:
    config = PhantomConfig()
    upper = np.asarray(config.shape, dtype=float) - 1
    for draw in range(100):
        for line in grow_vessel_tree(7 + draw, config):
            assert np.all(line.nodes >= 0.0)
            assert np.all(line.nodes <= upper)


@pytest.mark.parametrize("radius", [1.0, 0.4])
def test_rasterize_straight_segment_matches_distance_scan(radius) -> None:
    shape = (10, 5, 5)
    p0, p1 = (1.0, 2.0, 2.0), (8.0, 2.0, 2.0)
    line = Centerline(nodes=np.array([p0, p1]), radii=np.array([radius, radius]))
    grid = rasterize_vessels([line], shape)
    assert np.array_equal(grid, _distance_oracle(p0, p1, radius, shape))
    if radius < 0.5:
        assert set(map(tuple, np.argwhere(grid))) == {(i, 2, 2) for i in range(1, 9)}


def test_octa_exact_when_noise_free() -> None:
    config = PhantomConfig(speckle_level=0.0, vessel_intensity_range=(1.0, 1.0), shape=(6, 6, 6))
    vessels = np.zeros(config.shape, dtype=np.uint8)
    vessels[2:4, 1:5, 3] = 1
    assert np.array_equal(synth_octa_volume(vessels, 3, config).data, vessels.astype(np.float32))
    assert np.all(synth_octa_volume(np.zeros_like(vessels), 3, config).data == 0.0)


def test_octa_vessels_brighter_than_background() -> None:
    sample = generate_sample(3, PhantomConfig())
    vessels = sample.vessel_volume_3d.astype(bool)
    assert sample.octa.data[vessels].mean() - sample.octa.data[~vessels].mean() >= 0.3


def test_oct_without_shadow_is_pure_layers() -> None:
    config = PhantomConfig(shadow_strength=1.0, speckle_level=0.0, shape=(5, 5, 12))
    vessels = np.zeros(config.shape, dtype=np.uint8)
    vessels[2, 2, 4] = 1
    oct = synth_oct_volume(vessels, 0, config).data
    expected = layer_profile(12).astype(np.float32)
    assert np.allclose(oct, np.broadcast_to(expected, config.shape))


def test_shadow_halves_voxels_below_vessel() -> None:
    config = PhantomConfig(shadow_strength=0.5, speckle_level=0.0, shape=(2, 1, 10))
    vessels = np.zeros(config.shape, dtype=np.uint8)
    k = 4
    vessels[0, 0, k] = 1
    oct = synth_oct_volume(vessels, 0, config).data
    assert np.allclose(oct[0, 0, k + 1 :], 0.5 * oct[1, 0, k + 1 :])
    assert np.allclose(oct[0, 0, : k + 1], oct[1, 0, : k + 1])
    assert shadow_mask(vessels)[0, 0].tolist() == [False] * (k + 1) + [True] * (10 - k - 1)


def test_oct_deep_layers_darker_under_vessels() -> None:
    config = PhantomConfig()
    deep = slice(int(0.7 * config.shape[2]), None)
    gaps = []
    for seed in range(20):
        sample = generate_sample(seed, config)
        has_vessel = sample.vessel_mask_2d.data.astype(bool)
        if has_vessel.all() or not has_vessel.any():
            continue
        column_means = sample.oct.data[:, :, deep].mean(axis=2)
        gaps.append(column_means[~has_vessel].mean() - column_means[has_vessel].mean())
    assert gaps and min(gaps) > 0.0


def test_sample_mask_is_max_projection_of_vessel_grid() -> None:
    sample = generate_sample(9, tiny_phantom_config())
    assert sample.vessel_mask_2d.source is MaskSource.ANNOTATED
    assert np.array_equal(sample.vessel_mask_2d.data, sample.vessel_volume_3d.max(axis=2))
    assert sample.oct.shape == sample.octa.shape == sample.vessel_volume_3d.shape


def test_generate_dataset_layout_and_manifest(tmp_path) -> None:
    config = tiny_phantom_config()
    manifest = generate_dataset(2, 1, 1, 42, config, tmp_path / "ds")
    sample_dir = tmp_path / "ds" / "train" / "sample_0000"
    assert sorted(p.name for p in sample_dir.iterdir()) == [
        "meta.json",
        "oct.json",
        "oct.raw",
        "octa.json",
        "octa.raw",
        "vessel_mask.png",
    ]
    assert manifest["counts"] == {"train": 2, "val": 1, "test": 1}
    on_disk = json.loads((tmp_path / "ds" / "manifest.json").read_text())
    assert on_disk["master_seed"] == 42
    assert len(on_disk["splits"]["train"]) == 2

    dataset = PhantomDataset(tmp_path / "ds")
    assert [s.name for s in dataset.load("train")] == ["sample_0000", "sample_0001"]
    assert dataset.load("test")[0].octa.shape == config.shape


def test_generate_dataset_is_byte_identical(tmp_path) -> None:
    config = tiny_phantom_config()
    generate_dataset(2, 1, 1, 5, config, tmp_path / "a", workers=2)
    generate_dataset(2, 1, 1, 5, config, tmp_path / "b")
    files_a = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()


def test_empty_counts_give_valid_manifest(tmp_path) -> None:
    manifest = generate_dataset(0, 0, 0, 1, tiny_phantom_config(), tmp_path / "empty")
    assert manifest["splits"] == {"train": [], "val": [], "test": []}
    with pytest.raises(EmptySetError, match="empty"):
        PhantomDataset(tmp_path / "empty").require("test")


@pytest.mark.slow
def test_default_config_densities_in_band(tmp_path) -> None:
    config = PhantomConfig()
    manifest = generate_dataset(8, 2, 4, 0, config, tmp_path / "desk", workers=4)
    lo, hi = config.target_density_band
    densities = [m["density"] for split in manifest["splits"].values() for m in split]
    assert len(densities) == 14
    assert all(lo <= d <= hi for d in densities)


def test_infeasible_band_exhausts_retries(tmp_path) -> None:
    config = PhantomConfig(shape=(8, 8, 8), n_trees=0, target_density_band=(0.5, 1.0), max_retries=3)
    with pytest.raises(PhantomRetryError, match="after 3 attempts"):
        generate_dataset(1, 0, 0, 0, config, tmp_path / "bad")


def test_negative_counts_rejected(tmp_path) -> None:
    with pytest.raises(ValueError, match=">= 0"):
        generate_dataset(-1, 0, 0, 0, tiny_phantom_config(), tmp_path / "neg")
