"""Tests for checkpoint persistence and generator-only inference."""

from __future__ import annotations

import json

import numpy as np
import pytest
import torch

from core.checkpoints import LoaderRegistry, load_checkpoint, parameter_digest, read_manifest, save_checkpoint
from core.errors import CheckpointError, ShapeError
from core.inference import Translator, translate
from core.networks import GeneratorSpec, SegmenterSpec, build_generator, build_segmenter
from core.volumes import Volume

G3D_SPEC = GeneratorSpec(dims=3, base_channels=2, n_downsamples=2)


@pytest.fixture
def g3d_ckpt(tmp_path):
    model = build_generator(G3D_SPEC, seed=4)
    directory = tmp_path / "checkpoints" / "g3d"
    save_checkpoint(model, directory, role="g3d", spec=G3D_SPEC, epoch=3, val_metric="val_mae", val_score=0.1)
    return directory


def test_save_writes_blob_and_manifest(g3d_ckpt) -> None:
    assert (g3d_ckpt / "model.pt").exists()
    manifest = json.loads((g3d_ckpt / "manifest.json").read_text())
    assert manifest["role"] == "g3d"
    assert manifest["kind"] == "generator"
    assert manifest["init_seed"] == 4
    assert manifest["epoch"] == 3


def test_load_round_trip_preserves_parameters(g3d_ckpt) -> None:
    model, manifest = load_checkpoint(g3d_ckpt, expected_role="g3d")
    assert parameter_digest(model) == manifest.parameter_digest
    assert not model.frozen


def test_frozen_load(g3d_ckpt) -> None:
    model, _ = load_checkpoint(g3d_ckpt, frozen=True)
    assert model.frozen
    assert all(not p.requires_grad for p in model.parameters())


def test_role_mismatch_and_missing_files(g3d_ckpt, tmp_path) -> None:
    with pytest.raises(CheckpointError, match="expected 'vseg'"):
        load_checkpoint(g3d_ckpt, expected_role="vseg")
    with pytest.raises(CheckpointError, match="manifest not found"):
        read_manifest(tmp_path / "nowhere")

    (g3d_ckpt / "model.pt").unlink()
    with pytest.raises(CheckpointError, match="parameters not found"):
        load_checkpoint(g3d_ckpt)


def test_tampered_blob_is_detected(tmp_path) -> None:
    spec = SegmenterSpec(base_channels=2, n_downsamples=2)
    model = build_segmenter(spec, seed=0)
    directory = tmp_path / "vseg"
    save_checkpoint(model, directory, role="vseg", spec=spec, epoch=1)
    with torch.no_grad():
        next(model.parameters()).add_(1.0)
    torch.save(model.state_dict(), directory / "model.pt")
    with pytest.raises(CheckpointError, match="digest mismatch"):
        load_checkpoint(directory)


def test_translate_loads_only_the_generator(g3d_ckpt, rng) -> None:
    oct = Volume(rng.random((8, 8, 8), dtype=np.float32))
    registry = LoaderRegistry()
    out = translate(g3d_ckpt, oct, registry)
    assert out.shape == oct.shape
    assert registry.loaded == [f"g3d:{g3d_ckpt.as_posix()}"]


def test_translate_is_bit_deterministic(g3d_ckpt, rng) -> None:
    oct = Volume(rng.random((8, 8, 8), dtype=np.float32))
    translator = Translator(g3d_ckpt)
    first, second = translator(oct), translate(g3d_ckpt, oct)
    assert first.data.tobytes() == second.data.tobytes()


def test_translate_rejects_wrong_role_and_shape(tmp_path, g3d_ckpt, rng) -> None:
    spec = GeneratorSpec(dims=2, base_channels=2, n_downsamples=2)
    gpre_dir = tmp_path / "gpre"
    save_checkpoint(build_generator(spec), gpre_dir, role="gpre", spec=spec, epoch=1)
    oct = Volume(rng.random((8, 8, 8), dtype=np.float32))
    with pytest.raises(CheckpointError, match="role 'gpre'"):
        translate(gpre_dir, oct)
    with pytest.raises(ShapeError, match="not divisible by 4"):
        translate(g3d_ckpt, Volume(rng.random((8, 6, 8), dtype=np.float32)))
