"""Inference: OCT volume -> OCTA volume with the 3D generator alone."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
import torch

from .checkpoints import LoaderRegistry, load_checkpoint
from .errors import ShapeError
from .volumes import Volume

logger = logging.getLogger(__name__)


def volume_to_tensor(v: Volume) -> torch.Tensor:
    return torch.from_numpy(v.data.copy())[None, None]


def tensor_to_volume(t: torch.Tensor) -> Volume:
    return Volume(t.detach().cpu().clamp(0.0, 1.0)[0, 0].numpy().astype(np.float32))


class Translator:
    """Holds one loaded, frozen G3d and applies it to any number of volumes."""

    def __init__(self, g3d_ckpt: Path, registry: LoaderRegistry | None = None) -> None:
        self.registry = registry if registry is not None else LoaderRegistry()
        self.model, self.manifest = load_checkpoint(g3d_ckpt, expected_role="g3d", frozen=True, registry=self.registry)
        self.factor = 2 ** int(self.manifest.spec["n_downsamples"])

    def __call__(self, oct: Volume) -> Volume:
        if any(s % self.factor for s in oct.shape):
            raise ShapeError(f"Input shape {oct.shape} is not divisible by {self.factor} for this generator")
        with torch.no_grad():
            out = self.model(volume_to_tensor(oct))
        return tensor_to_volume(out)


def translate(g3d_ckpt: Path, oct: Volume, registry: LoaderRegistry | None = None) -> Volume:
    """
    Translate one OCT volume; only the generator checkpoint is loaded.

    Raises:
        CheckpointError: the checkpoint is missing or is not a g3d checkpoint
        ShapeError: the input shape does not satisfy the generator's divisibility
    """
    return Translator(g3d_ckpt, registry)(oct)
