"""Procedural paired OCT/OCTA phantoms with exact vessel ground truth."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from .errors import EmptySetError, PhantomRetryError
from .utils import derive_seed, sha256_hex, write_canonical_json
from .volumes import (
    MaskSource,
    VesselMask,
    Volume,
    load_mask_image,
    load_volume,
    save_mask_image,
    save_volume,
)

logger = logging.getLogger(__name__)

SPLITS: tuple[str, str, str] = ("train", "val", "test")

# Retina-like depth profile: (center as fraction of depth, peak intensity, half-width fraction).
_LAYER_BANDS: tuple[tuple[float, float, float], ...] = (
    (0.28, 0.35, 0.05),
    (0.42, 0.55, 0.04),
    (0.58, 0.30, 0.05),
    (0.76, 0.65, 0.04),
    (0.88, 0.40, 0.05),
)
_LAYER_BASE = 0.12


class PhantomConfig(BaseModel):
    """Knobs of the procedural generator; defaults target (64, 64, 32) desk-scale samples."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    shape: tuple[int, int, int] = (64, 64, 32)
    n_trees: int = Field(default=3, ge=0)
    branch_prob: float = Field(default=0.05, ge=0.0, le=1.0)
    radius_start: float = Field(default=1.6, gt=0.0)
    radius_decay: float = Field(default=0.8, gt=0.0, le=1.0)
    min_radius: float = Field(default=0.6, gt=0.0)
    step_length: float = Field(default=1.5, gt=0.0)
    max_steps: int = Field(default=36, ge=1)
    turn_std: float = Field(default=0.25, ge=0.0)
    heading_pull: float = Field(default=0.15, ge=0.0, le=1.0)
    depth_drift: float = Field(default=0.3, ge=0.0)
    branch_angle: float = Field(default=0.7, ge=0.0)
    max_branches_per_tree: int = Field(default=5, ge=0)
    vessel_intensity_range: tuple[float, float] = (0.6, 1.0)
    speckle_level: float = Field(default=0.05, ge=0.0, le=1.0)
    shadow_strength: float = Field(default=0.5, gt=0.0, le=1.0)
    target_density_band: tuple[float, float] = (0.05, 0.35)
    max_retries: int = Field(default=16, ge=1)

    @field_validator("shape")
    @classmethod
    def _positive_shape(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(s < 1 for s in value):
            raise ValueError(f"shape entries must be >= 1, got {value}")
        return value

    @field_validator("vessel_intensity_range", "target_density_band")
    @classmethod
    def _unit_interval(cls, value: tuple[float, float]) -> tuple[float, float]:
        lo, hi = value
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError(f"range must satisfy 0 <= lo <= hi <= 1, got {value}")
        return value

    @model_validator(mode="after")
    def _radius_order(self) -> PhantomConfig:
        if self.min_radius > self.radius_start:
            raise ValueError("min_radius must not exceed radius_start")
        return self


@dataclass(frozen=True)
class Centerline:
    """One vessel polyline: node positions (n, 3) in voxel coordinates and per-node radius (n,)."""

    nodes: np.ndarray
    radii: np.ndarray


@dataclass(frozen=True)
class PhantomSample:
    oct: Volume
    octa: Volume
    vessel_mask_2d: VesselMask
    vessel_volume_3d: np.ndarray
    seed: int


@dataclass(frozen=True)
class StoredSample:
    """A sample read back from a dataset directory (no 3D vessel grid on disk)."""

    name: str
    oct: Volume
    octa: Volume
    vessel_mask: VesselMask
    seed: int


def grow_vessel_tree(seed: int, config: PhantomConfig) -> list[Centerline]:
    """
    Grow ``config.n_trees`` vessel trees as biased random walks in the (L, W) plane.

    Each tree starts near the mid-depth plane, keeps drifting toward its initial heading,
    and spawns side branches with probability ``branch_prob`` per step; each branch
    multiplies the radius by ``radius_decay``. Every node stays inside the volume.
    """
    rng = np.random.default_rng(seed)
    L, W, D = config.shape
    bounds_hi = np.array([L - 1, W - 1], dtype=np.float64)
    mid = (D - 1) / 2.0
    depth_lo = max(0.0, mid - 0.15 * (D - 1))
    depth_hi = min(D - 1.0, mid + 0.15 * (D - 1))

    centerlines: list[Centerline] = []
    for _ in range(config.n_trees):
        start = np.array(
            [
                rng.uniform(0.0, bounds_hi[0]),
                rng.uniform(0.0, bounds_hi[1]),
                float(np.clip(mid + rng.normal(0.0, 0.05 * D), depth_lo, depth_hi)),
            ]
        )
        pending = [(start, float(rng.uniform(0.0, 2.0 * np.pi)), config.radius_start)]
        branches = 0

        while pending:
            position, heading, radius = pending.pop()
            reference = heading
            nodes = [position.copy()]
            radii = [radius]
            for _step in range(config.max_steps):
                heading += config.heading_pull * (reference - heading) + rng.normal(0.0, config.turn_std)
                lateral = position[:2] + config.step_length * np.array([np.cos(heading), np.sin(heading)])
                if np.any(lateral < 0.0) or np.any(lateral > bounds_hi):
                    break
                depth = float(np.clip(position[2] + rng.normal(0.0, config.depth_drift), depth_lo, depth_hi))
                position = np.array([lateral[0], lateral[1], depth])
                nodes.append(position.copy())
                radii.append(radius)

                child_radius = radius * config.radius_decay
                if (
                    rng.random() < config.branch_prob
                    and branches < config.max_branches_per_tree
                    and child_radius >= config.min_radius
                ):
                    side = 1.0 if rng.random() < 0.5 else -1.0
                    pending.append((position.copy(), heading + side * config.branch_angle, child_radius))
                    branches += 1

            if len(nodes) >= 2:
                centerlines.append(Centerline(nodes=np.asarray(nodes), radii=np.asarray(radii)))

    return centerlines


def rasterize_vessels(trees: list[Centerline], shape: tuple[int, int, int]) -> np.ndarray:
    """Mark voxels whose centers lie within the (linearly interpolated) radius of any centerline segment."""
    grid = np.zeros(shape, dtype=np.uint8)
    upper = np.asarray(shape) - 1
    for line in trees:
        for k in range(len(line.nodes) - 1):
            p0, p1 = line.nodes[k], line.nodes[k + 1]
            r0, r1 = float(line.radii[k]), float(line.radii[k + 1])
            reach = max(r0, r1)
            lo = np.clip(np.floor(np.minimum(p0, p1) - reach), 0, upper).astype(int)
            hi = np.clip(np.ceil(np.maximum(p0, p1) + reach), 0, upper).astype(int)
            axes = [np.arange(lo[a], hi[a] + 1, dtype=np.float64) for a in range(3)]
            xs, ys, zs = np.meshgrid(*axes, indexing="ij")
            points = np.stack([xs, ys, zs], axis=-1)

            direction = p1 - p0
            length_sq = float(direction @ direction)
            if length_sq == 0.0:
                t = np.zeros(points.shape[:-1])
            else:
                t = np.clip(((points - p0) @ direction) / length_sq, 0.0, 1.0)
            closest = p0 + t[..., None] * direction
            dist = np.linalg.norm(points - closest, axis=-1)
            inside = dist <= r0 + t * (r1 - r0)

            region = grid[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1]
            region[inside] = 1
    return grid


def synth_octa_volume(vessel_volume: np.ndarray, seed: int, config: PhantomConfig) -> Volume:
    """Flow signal: vessel voxels uniform in the intensity range, background clamped speckle."""
    rng = np.random.default_rng(seed)
    lo, hi = config.vessel_intensity_range
    flow = rng.uniform(lo, hi, size=vessel_volume.shape)
    if config.speckle_level > 0.0:
        background = np.clip(rng.normal(0.0, config.speckle_level, size=vessel_volume.shape), 0.0, 1.0)
    else:
        background = np.zeros(vessel_volume.shape)
    return Volume(np.where(vessel_volume.astype(bool), flow, background).astype(np.float32))


def layer_profile(depth: int) -> np.ndarray:
    """Smooth depth profile of horizontal retina-like bands, values in [0, 1]."""
    z = np.linspace(0.0, 1.0, depth) if depth > 1 else np.zeros(1)
    profile = np.full(depth, _LAYER_BASE)
    for center, peak, width in _LAYER_BANDS:
        profile += peak * np.exp(-0.5 * ((z - center) / width) ** 2)
    return np.clip(profile, 0.0, 1.0)


def shadow_mask(vessel_volume: np.ndarray) -> np.ndarray:
    """True for voxels deeper than every vessel voxel of their (i, j) column."""
    depth = vessel_volume.shape[2]
    has_vessel = vessel_volume.any(axis=2)
    deepest = depth - 1 - np.argmax(vessel_volume[:, :, ::-1].astype(bool), axis=2)
    below = np.arange(depth)[None, None, :] > deepest[:, :, None]
    return below & has_vessel[:, :, None]


def synth_oct_volume(vessel_volume: np.ndarray, seed: int, config: PhantomConfig) -> Volume:
    """Structural signal: layered bands, attenuated beneath vessels by ``shadow_strength``, plus speckle."""
    rng = np.random.default_rng(seed)
    layered = np.broadcast_to(layer_profile(vessel_volume.shape[2]), vessel_volume.shape).astype(np.float64)
    attenuated = np.where(shadow_mask(vessel_volume), layered * config.shadow_strength, layered)
    if config.speckle_level > 0.0:
        attenuated = attenuated + rng.normal(0.0, config.speckle_level, size=vessel_volume.shape)
    return Volume(np.clip(attenuated, 0.0, 1.0).astype(np.float32))


def generate_sample(seed: int, config: PhantomConfig) -> PhantomSample:
    """Build one paired sample; OCT and OCTA derive from the same vessel grid."""
    trees = grow_vessel_tree(derive_seed(seed, "tree"), config)
    vessels = rasterize_vessels(trees, config.shape)
    mask = VesselMask(vessels.max(axis=2), source=MaskSource.ANNOTATED)
    return PhantomSample(
        oct=synth_oct_volume(vessels, derive_seed(seed, "oct"), config),
        octa=synth_octa_volume(vessels, derive_seed(seed, "octa"), config),
        vessel_mask_2d=mask,
        vessel_volume_3d=vessels,
        seed=seed,
    )


def _generate_within_band(master_seed: int, split: str, index: int, config: PhantomConfig) -> tuple[PhantomSample, int]:
    lo, hi = config.target_density_band
    for attempt in range(config.max_retries):
        sample = generate_sample(derive_seed(master_seed, split, index, attempt), config)
        density = float(sample.vessel_mask_2d.data.mean())
        if lo <= density <= hi:
            return sample, attempt
        logger.debug(f"{split}[{index}] attempt {attempt}: density {density:.4f} outside band [{lo}, {hi}]")
    raise PhantomRetryError(
        f"Could not place {split} sample {index} inside density band {config.target_density_band} "
        f"after {config.max_retries} attempts; the phantom config is infeasible"
    )


def sample_dir_name(index: int) -> str:
    return f"sample_{index:04d}"


def write_sample(sample: PhantomSample, directory: Path, meta: dict) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    save_volume(sample.oct, directory / "oct.raw")
    save_volume(sample.octa, directory / "octa.raw")
    save_mask_image(sample.vessel_mask_2d, directory / "vessel_mask.png")
    write_canonical_json(directory / "meta.json", meta)


def generate_dataset(
    n_train: int,
    n_val: int,
    n_test: int,
    master_seed: int,
    config: PhantomConfig,
    out_dir: Path,
    *,
    workers: int = 1,
    progress: bool = False,
) -> dict:
    """
    Generate a full phantom dataset under ``out_dir`` and return its manifest.

    Per-sample seeds are derived from (master_seed, split, index, attempt); samples whose
    mask density falls outside ``target_density_band`` are regenerated with the next attempt.
    """
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(n < 0 for n in counts.values()):
        raise ValueError(f"Sample counts must be >= 0, got {counts}")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    tasks = [(split, index) for split in SPLITS for index in range(counts[split])]

    def _build(task: tuple[str, int]) -> dict:
        split, index = task
        sample, attempt = _generate_within_band(master_seed, split, index, config)
        density = float(sample.vessel_mask_2d.data.mean())
        meta = {
            "split": split,
            "index": index,
            "seed": sample.seed,
            "attempt": attempt,
            "density": density,
            "shape": list(config.shape),
        }
        write_sample(sample, out_dir / split / sample_dir_name(index), meta)
        return meta

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(tqdm(pool.map(_build, tasks), total=len(tasks), disable=not progress, desc="phantoms"))

    manifest = {
        "config": config.model_dump(mode="json"),
        "config_hash": sha256_hex(config.model_dump_json()),
        "master_seed": master_seed,
        "counts": counts,
        "splits": {split: [m for m in results if m["split"] == split] for split in SPLITS},
    }
    write_canonical_json(out_dir / "manifest.json", manifest)
    logger.info(f"Generated {len(results)} phantom samples under {out_dir}")
    return manifest


class PhantomDataset:
    """Read-only view of a generated dataset directory."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        if not (self.root / "manifest.json").exists():
            raise FileNotFoundError(f"Dataset manifest not found: {self.root / 'manifest.json'}")

    def sample_dirs(self, split: str) -> list[Path]:
        if split not in SPLITS:
            raise ValueError(f"Unknown split '{split}', expected one of {SPLITS}")
        split_dir = self.root / split
        if not split_dir.exists():
            return []
        return sorted(p for p in split_dir.iterdir() if p.is_dir() and p.name.startswith("sample_"))

    def load(self, split: str) -> list[StoredSample]:
        return [load_sample(d) for d in self.sample_dirs(split)]

    def require(self, split: str) -> list[StoredSample]:
        samples = self.load(split)
        if not samples:
            raise EmptySetError(f"Dataset split '{split}' under {self.root} is empty")
        return samples


def load_sample(directory: Path) -> StoredSample:
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    return StoredSample(
        name=directory.name,
        oct=load_volume(directory / "oct.raw"),
        octa=load_volume(directory / "octa.raw"),
        vessel_mask=load_mask_image(directory / "vessel_mask.png"),
        seed=int(meta["seed"]),
    )
