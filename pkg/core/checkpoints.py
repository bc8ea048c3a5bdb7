"""Checkpoint persistence: parameter blob plus a JSON manifest, and a registry of loaded models."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict
from torch import nn

from .errors import CheckpointError
from .networks import (
    DiscriminatorSpec,
    GeneratorSpec,
    SegmenterSpec,
    build_discriminator,
    build_generator,
    build_segmenter,
    freeze,
    parameter_count,
)

logger = logging.getLogger(__name__)

Role = Literal["g3d", "d3d", "d2d", "gpre", "dpre", "vseg"]
Kind = Literal["generator", "discriminator", "segmenter"]

MODEL_FILE = "model.pt"
MANIFEST_FILE = "manifest.json"


class CheckpointManifest(BaseModel):
    """Everything needed to rebuild and audit a saved model."""

    model_config = ConfigDict(extra="forbid")

    role: Role
    kind: Kind
    spec: dict
    init_seed: int
    parameter_count: int
    parameter_digest: str
    epoch: int
    val_metric: str | None = None
    val_score: float | None = None
    config_hash: str = ""


def parameter_digest(model: nn.Module) -> str:
    """SHA-256 over every state-dict tensor in order; equal digests mean bit-identical parameters."""
    h = hashlib.sha256()
    for name, tensor in model.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _kind_of(spec: GeneratorSpec | DiscriminatorSpec | SegmenterSpec) -> Kind:
    if isinstance(spec, GeneratorSpec):
        return "generator"
    if isinstance(spec, DiscriminatorSpec):
        return "discriminator"
    return "segmenter"


def rebuild(kind: Kind, spec: dict, seed: int) -> nn.Module:
    if kind == "generator":
        return build_generator(GeneratorSpec.model_validate(spec), seed)
    if kind == "discriminator":
        return build_discriminator(DiscriminatorSpec.model_validate(spec), seed)
    return build_segmenter(SegmenterSpec.model_validate(spec), seed)


def save_checkpoint(
    model: nn.Module,
    directory: Path,
    *,
    role: Role,
    spec: GeneratorSpec | DiscriminatorSpec | SegmenterSpec,
    epoch: int,
    val_metric: str | None = None,
    val_score: float | None = None,
    config_hash: str = "",
) -> CheckpointManifest:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = CheckpointManifest(
        role=role,
        kind=_kind_of(spec),
        spec=spec.model_dump(mode="json"),
        init_seed=int(getattr(model, "init_seed", 0)),
        parameter_count=parameter_count(model),
        parameter_digest=parameter_digest(model),
        epoch=epoch,
        val_metric=val_metric,
        val_score=val_score,
        config_hash=config_hash,
    )
    torch.save(model.state_dict(), directory / MODEL_FILE)
    (directory / MANIFEST_FILE).write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    return manifest


def read_manifest(directory: Path) -> CheckpointManifest:
    path = Path(directory) / MANIFEST_FILE
    if not path.exists():
        raise CheckpointError(f"Checkpoint manifest not found: {path}")
    return CheckpointManifest.model_validate_json(path.read_text(encoding="utf-8"))


@dataclass
class LoaderRegistry:
    """Records which checkpoints a process has loaded."""

    loaded: list[str] = field(default_factory=list)

    def record(self, role: str, directory: Path) -> None:
        self.loaded.append(f"{role}:{Path(directory).as_posix()}")


def load_checkpoint(
    directory: Path,
    *,
    expected_role: Role | None = None,
    frozen: bool = False,
    registry: LoaderRegistry | None = None,
) -> tuple[nn.Module, CheckpointManifest]:
    """
    Rebuild a model from its manifest spec and load the stored parameters.

    Raises:
        CheckpointError: missing files, role mismatch, or parameter digest mismatch
    """
    directory = Path(directory)
    manifest = read_manifest(directory)
    if expected_role is not None and manifest.role != expected_role:
        raise CheckpointError(f"Checkpoint {directory} holds role '{manifest.role}', expected '{expected_role}'")
    blob = directory / MODEL_FILE
    if not blob.exists():
        raise CheckpointError(f"Checkpoint parameters not found: {blob}")

    model = rebuild(manifest.kind, manifest.spec, manifest.init_seed)
    model.load_state_dict(torch.load(blob, map_location="cpu", weights_only=True))
    if parameter_digest(model) != manifest.parameter_digest:
        raise CheckpointError(f"Parameter digest mismatch for {directory}; the blob and manifest disagree")
    if frozen:
        freeze(model)
    else:
        model.frozen = False  # type: ignore[attr-defined]
    if registry is not None:
        registry.record(manifest.role, directory)
    logger.info(f"Loaded {manifest.role} checkpoint from {directory} (epoch {manifest.epoch}, frozen={frozen})")
    return model, manifest
