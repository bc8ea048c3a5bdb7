"""Volume and projection-map types, the mean-projection operator, and raw tensor I/O."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from pathlib import Path
from typing import Literal

import numpy as np
import torch
from PIL import Image
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import MaskSourceError, RangeViolationError, ShapeError, VolumeFormatError

logger = logging.getLogger(__name__)

AXES: tuple[str, str, str] = ("L", "W", "D")
RAW_DTYPE = np.dtype("<f4")


def _check_unit_range(data: np.ndarray, what: str) -> None:
    if data.size == 0:
        return
    if not np.all(np.isfinite(data)):
        raise RangeViolationError(f"{what} contains non-finite values")
    lo, hi = float(data.min()), float(data.max())
    if lo < 0.0 or hi > 1.0:
        raise RangeViolationError(f"{what} values must lie in [0, 1], found [{lo}, {hi}]")


@dataclass(frozen=True, eq=False)
class Volume:
    """3D intensity grid with axes (L=lateral, W=B-scan index, D=depth), values in [0, 1]."""

    data: np.ndarray
    axes: tuple[str, str, str] = AXES

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ShapeError(f"Volume must be a non-empty 3D grid, got shape {arr.shape}")
        if tuple(self.axes) != AXES:
            raise ShapeError(f"Volume axes must be {AXES}, got {self.axes}")
        _check_unit_range(arr, "Volume")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    def bscan(self, w: int) -> np.ndarray:
        """Return the (L x D) B-scan at slice index ``w``."""
        return self.data[:, w, :]


@dataclass(frozen=True, eq=False)
class ProjectionMap:
    """2D en-face map of shape (L, W), values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ShapeError(f"ProjectionMap must be a non-empty 2D grid, got shape {arr.shape}")
        _check_unit_range(arr, "ProjectionMap")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]


class MaskSource(StrEnum):
    ANNOTATED = "annotated-ground-truth"
    THRESHOLD = "mean-threshold-derived"


@dataclass(frozen=True, eq=False)
class VesselMask:
    """Binary (L, W) vessel mask tagged with where it came from."""

    data: np.ndarray
    source: MaskSource = field(default=MaskSource.ANNOTATED)

    def __post_init__(self) -> None:
        arr = np.asarray(self.data)
        if arr.ndim != 2 or min(arr.shape) < 1:
            raise ShapeError(f"VesselMask must be a non-empty 2D grid, got shape {arr.shape}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("VesselMask elements must be 0 or 1")
        object.__setattr__(self, "data", arr.astype(np.uint8))
        object.__setattr__(self, "source", MaskSource(self.source))

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(int(s) for s in self.data.shape)  # type: ignore[return-value]

    def require(self, source: MaskSource, operation: str) -> None:
        if self.source != source:
            raise MaskSourceError(f"{operation} requires a '{source}' mask, got '{self.source}'")


class VolumeHeader(BaseModel):
    """Sidecar metadata written next to every raw tensor."""

    model_config = ConfigDict(extra="forbid")

    shape: list[int] = Field(min_length=3, max_length=3)
    axes: list[str] = Field(default_factory=lambda: list(AXES))
    dtype: Literal["f32le"] = "f32le"
    range: list[float] = Field(default_factory=lambda: [0.0, 1.0])

    @field_validator("shape")
    @classmethod
    def _positive(cls, value: list[int]) -> list[int]:
        if any(s < 1 for s in value):
            raise ValueError(f"shape entries must be >= 1, got {value}")
        return value

    @field_validator("axes")
    @classmethod
    def _axis_order(cls, value: list[str]) -> list[str]:
        if tuple(value) != AXES:
            raise ValueError(f"axes must be {list(AXES)}, got {value}")
        return value

    @field_validator("range")
    @classmethod
    def _unit_range(cls, value: list[float]) -> list[float]:
        if value != [0.0, 1.0]:
            raise ValueError(f"range must be [0.0, 1.0], got {value}")
        return value


def sidecar_path(path: Path) -> Path:
    return path.with_suffix(".json")


def project_mean(v: Volume) -> ProjectionMap:
    """Average a volume along depth: out(i, j) = mean_d v(i, j, d)."""
    projected = v.data.mean(axis=2, dtype=np.float64)
    return ProjectionMap(np.clip(projected, 0.0, 1.0).astype(np.float32))


def project_tensor(t: torch.Tensor) -> torch.Tensor:
    """Differentiable projection for network tensors laid out (..., L, W, D)."""
    return t.mean(dim=-1)


def save_volume(v: Volume, path: Path) -> None:
    """Write ``v`` as little-endian float32 C-order bytes plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = VolumeHeader(shape=list(v.shape))
    path.write_bytes(v.data.astype(RAW_DTYPE, copy=False).tobytes(order="C"))
    sidecar_path(path).write_text(header.model_dump_json(indent=2), encoding="utf-8")


def load_volume(path: Path) -> Volume:
    """
    Load a raw volume written by :func:`save_volume`.

    Raises:
        FileNotFoundError: raw file missing
        VolumeFormatError: sidecar missing/malformed or byte count disagrees with its shape
        RangeViolationError: stored values outside [0, 1] (never clamped)
    """
    path = Path(path)
    meta_path = sidecar_path(path)
    if not path.exists():
        raise FileNotFoundError(f"Volume file not found: {path}")
    if not meta_path.exists():
        raise VolumeFormatError(f"Missing sidecar metadata for {path}: expected {meta_path}")
    try:
        header = VolumeHeader.model_validate_json(meta_path.read_text(encoding="utf-8"))
    except ValidationError as e:
        raise VolumeFormatError(f"Malformed sidecar {meta_path}: {e}") from e

    payload = path.read_bytes()
    expected = int(np.prod(header.shape)) * RAW_DTYPE.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"Shape mismatch for {path}: sidecar declares {header.shape} ({expected} bytes), file holds {len(payload)}"
        )
    data = np.frombuffer(payload, dtype=RAW_DTYPE).reshape(header.shape)
    _check_unit_range(data, f"Volume file {path}")
    return Volume(data.astype(np.float32))


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to 0..255 with round-half-up."""
    return np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5).clip(0, 255).astype(np.uint8)


def save_projection_image(m: ProjectionMap, path: Path) -> None:
    """Export a projection map as an 8-bit grayscale PNG (row i = lateral index)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(m.data)).save(path, format="PNG")


def save_mask_image(mask: VesselMask, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(mask.data * np.uint8(255)).save(path, format="PNG")


def load_mask_image(path: Path, source: MaskSource = MaskSource.ANNOTATED) -> VesselMask:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Mask image not found: {path}")
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("L"))
    return VesselMask((pixels > 127).astype(np.uint8), source=source)
