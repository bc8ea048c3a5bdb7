"""Evaluation suite: per-B-scan MAE/PSNR/SSIM, vessel-weighted variants, vessel density, VDE, VDC, gamma sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from skimage.metrics import peak_signal_noise_ratio, structural_similarity

from .errors import EmptySetError, ShapeError
from .volumes import MaskSource, ProjectionMap, VesselMask, Volume, project_mean

logger = logging.getLogger(__name__)

DATA_RANGE = 1.0
PSNR_CAP = 100.0
SSIM_SIGMA = 1.5
SSIM_MIN_SIDE = 11
DEFAULT_PATCH = 16
GAMMA_SERIES: tuple[float, ...] = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1)

# Published aggregates on the real OCTA-500 subsets; documentation only.
PUBLISHED_REFERENCE: dict[str, dict[str, float]] = {
    "OCTA-3M": {
        "mae": 0.0782,
        "psnr": 32.56,
        "ssim": 0.8822,
        "mae_v": 0.0658,
        "psnr_v": 20.42,
        "ssim_v": 0.9179,
        "vde": 0.1304,
        "vdc": 0.7441,
    },
    "OCTA-6M": {"mae": 0.0854, "vde": 0.1492, "vdc": 0.7347},
}
PUBLISHED_REFERENCE_LABEL = "published OCTA-500 reference; not expected on phantoms"

METRIC_NAMES: tuple[str, ...] = ("mae", "psnr", "ssim", "mae_v", "psnr_v", "ssim_v", "vde", "vdc")
TABLE_COLUMNS: tuple[str, ...] = ("mae", "psnr", "ssim", "vde", "vdc")


class WeightingConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(default=0.1, gt=0.0, le=1.0)


def _grid(x: Volume | ProjectionMap | np.ndarray) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, (Volume, ProjectionMap)) else x, dtype=np.float64)


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a, b = _grid(a), _grid(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b


# -- 2D kernels ---------------------------------------------------------------


def mae_2d(a, b) -> float:
    a, b = _pair(a, b, "mae")
    return float(np.mean(np.abs(a - b)))


def psnr_2d(a, b, cap: float = PSNR_CAP) -> float:
    """PSNR with data range 1.0; identical images return ``cap``."""
    a, b = _pair(a, b, "psnr")
    if np.array_equal(a, b):
        return cap
    return float(min(peak_signal_noise_ratio(a, b, data_range=DATA_RANGE), cap))


def ssim_2d(a, b) -> float:
    """SSIM with an 11-tap Gaussian window (sigma 1.5), K1=0.01, K2=0.03, population covariance."""
    a, b = _pair(a, b, "ssim")
    if min(a.shape) < SSIM_MIN_SIDE:
        raise ShapeError(f"ssim needs both sides >= {SSIM_MIN_SIDE}, got {a.shape}")
    return float(
        structural_similarity(
            a,
            b,
            data_range=DATA_RANGE,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            K1=0.01,
            K2=0.03,
        )
    )


# -- volume metrics (per B-scan, then averaged over W) ------------------------


def _bscans(Y, Yhat, what: str) -> list[tuple[np.ndarray, np.ndarray]]:
    y, yhat = _pair(Y, Yhat, what)
    if y.ndim != 3:
        raise ShapeError(f"{what} expects (L, W, D) volumes, got {y.shape}")
    return [(y[:, w, :], yhat[:, w, :]) for w in range(y.shape[1])]


def mae_volume(Y, Yhat) -> float:
    return float(np.mean([mae_2d(a, b) for a, b in _bscans(Y, Yhat, "mae_volume")]))


def psnr_volume(Y, Yhat, cap: float = PSNR_CAP) -> float:
    return float(np.mean([psnr_2d(a, b, cap) for a, b in _bscans(Y, Yhat, "psnr_volume")]))


def ssim_volume(Y, Yhat) -> float:
    return float(np.mean([ssim_2d(a, b) for a, b in _bscans(Y, Yhat, "ssim_volume")]))


def capped_bscans(Y, Yhat) -> int:
    """Number of B-scan pairs that hit the PSNR cap (zero MSE)."""
    return sum(1 for a, b in _bscans(Y, Yhat, "psnr_volume") if np.array_equal(a, b))


# -- vessel weighting ---------------------------------------------------------


def vessel_weight(map: ProjectionMap, mask: VesselMask, w: WeightingConfig) -> ProjectionMap:
    """Scale non-vessel pixels by gamma; vessel pixels are unchanged."""
    mask.require(MaskSource.ANNOTATED, "vessel_weight")
    if map.shape != mask.shape:
        raise ShapeError(f"vessel_weight: map {map.shape} vs mask {mask.shape}")
    if w.gamma == 1.0:
        return ProjectionMap(map.data.copy())
    weighted = np.where(mask.data.astype(bool), map.data.astype(np.float64), w.gamma * map.data.astype(np.float64))
    return ProjectionMap(weighted.astype(np.float32))


@dataclass(frozen=True)
class WeightedScores:
    mae_v: float
    psnr_v: float
    ssim_v: float


def weighted_metric_suite(
    gt_map: ProjectionMap,
    pred_map: ProjectionMap,
    gt_mask: VesselMask,
    w: WeightingConfig,
    cap: float = PSNR_CAP,
) -> WeightedScores:
    gt_w = vessel_weight(gt_map, gt_mask, w)
    pred_w = vessel_weight(pred_map, gt_mask, w)
    return WeightedScores(
        mae_v=mae_2d(gt_w, pred_w),
        psnr_v=psnr_2d(gt_w, pred_w, cap),
        ssim_v=ssim_2d(gt_w, pred_w),
    )


# -- vessel density -----------------------------------------------------------


def segment_global_mean_threshold(map: ProjectionMap) -> VesselMask:
    """Vessel iff strictly above the map's global mean."""
    mean = map.data.mean(dtype=np.float64)
    return VesselMask((map.data > mean).astype(np.uint8), source=MaskSource.THRESHOLD)


def vessel_density(mask: VesselMask) -> float:
    return float(mask.data.sum(dtype=np.int64)) / mask.data.size


def _paired_maps(gt_maps: Sequence[ProjectionMap], pred_maps: Sequence[ProjectionMap], what: str) -> None:
    if len(gt_maps) == 0:
        raise EmptySetError(f"{what} over an empty set")
    if len(gt_maps) != len(pred_maps):
        raise ShapeError(f"{what}: {len(gt_maps)} ground-truth maps vs {len(pred_maps)} predictions")


def vde(gt_maps: Sequence[ProjectionMap], pred_maps: Sequence[ProjectionMap]) -> float:
    """Mean absolute vessel-density difference, each map thresholded at its own mean."""
    _paired_maps(gt_maps, pred_maps, "vde")
    diffs = [
        abs(vessel_density(segment_global_mean_threshold(p)) - vessel_density(segment_global_mean_threshold(g)))
        for g, p in zip(gt_maps, pred_maps)
    ]
    return float(np.mean(diffs))


@dataclass(frozen=True)
class DensityArray:
    values: np.ndarray
    patch_size: int
    cropped: bool = False


def density_array(mask: VesselMask, patch: int = DEFAULT_PATCH) -> DensityArray:
    """Per-patch vessel density in row-major patch order; non-divisible maps are center-cropped."""
    L, W = mask.shape
    if patch < 1 or patch > L or patch > W:
        raise ShapeError(f"patch size {patch} does not fit a {mask.shape} map")
    L_fit, W_fit = (L // patch) * patch, (W // patch) * patch
    top, left = (L - L_fit) // 2, (W - W_fit) // 2
    cropped = (L_fit, W_fit) != (L, W)
    grid = mask.data[top : top + L_fit, left : left + W_fit].astype(np.float64)
    blocks = grid.reshape(L_fit // patch, patch, W_fit // patch, patch)
    return DensityArray(values=blocks.mean(axis=(1, 3)).reshape(-1), patch_size=patch, cropped=cropped)


def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
    """Pearson correlation; returns (0.0, True) when either array is constant."""
    if a.shape != b.shape:
        raise ShapeError(f"pearson: length mismatch {a.shape} vs {b.shape}")
    da, db = a - a.mean(), b - b.mean()
    sa, sb = np.sqrt(np.mean(da * da)), np.sqrt(np.mean(db * db))
    if sa == 0.0 or sb == 0.0:
        return 0.0, True
    r = float(np.mean(da * db) / (sa * sb))
    return float(np.clip(r, -1.0, 1.0)), False


@dataclass(frozen=True)
class VDCResult:
    value: float
    per_pair: list[float]
    degenerate_pairs: int
    cropped: bool


def vdc_detailed(
    gt_maps: Sequence[ProjectionMap], pred_maps: Sequence[ProjectionMap], patch: int = DEFAULT_PATCH
) -> VDCResult:
    _paired_maps(gt_maps, pred_maps, "vdc")
    per_pair: list[float] = []
    degenerate = 0
    cropped = False
    for g, p in zip(gt_maps, pred_maps):
        if g.shape != p.shape:
            raise ShapeError(f"vdc: map shapes differ {g.shape} vs {p.shape}")
        dg = density_array(segment_global_mean_threshold(g), patch)
        dp = density_array(segment_global_mean_threshold(p), patch)
        r, flat = pearson(dg.values, dp.values)
        per_pair.append(r)
        degenerate += int(flat)
        cropped = cropped or dg.cropped
    if degenerate:
        logger.warning(f"vdc: {degenerate} pair(s) had a constant density array and contribute 0")
    return VDCResult(float(np.mean(per_pair)), per_pair, degenerate, cropped)


def vdc(gt_maps: Sequence[ProjectionMap], pred_maps: Sequence[ProjectionMap], patch: int = DEFAULT_PATCH) -> float:
    return vdc_detailed(gt_maps, pred_maps, patch).value


# -- gamma sweep --------------------------------------------------------------


@dataclass
class GammaSweep:
    gammas: list[float]
    mae_v: list[float] = field(default_factory=list)
    psnr_v: list[float] = field(default_factory=list)
    ssim_v: list[float] = field(default_factory=list)

    def as_dict(self) -> dict[str, list[float]]:
        return {"gamma": self.gammas, "mae_v": self.mae_v, "psnr_v": self.psnr_v, "ssim_v": self.ssim_v}


def gamma_sweep(
    gt_maps: Sequence[ProjectionMap],
    pred_maps: Sequence[ProjectionMap],
    gt_masks: Sequence[VesselMask],
    gammas: Sequence[float] = GAMMA_SERIES,
) -> GammaSweep:
    """Weighted metrics averaged over the set at each gamma."""
    _paired_maps(gt_maps, pred_maps, "gamma_sweep")
    if len(gt_masks) != len(gt_maps):
        raise ShapeError(f"gamma_sweep: {len(gt_masks)} masks for {len(gt_maps)} maps")
    sweep = GammaSweep(gammas=[float(g) for g in gammas])
    for gamma in sweep.gammas:
        w = WeightingConfig(gamma=gamma)
        scores = [weighted_metric_suite(g, p, m, w) for g, p, m in zip(gt_maps, pred_maps, gt_masks)]
        sweep.mae_v.append(float(np.mean([s.mae_v for s in scores])))
        sweep.psnr_v.append(float(np.mean([s.psnr_v for s in scores])))
        sweep.ssim_v.append(float(np.mean([s.ssim_v for s in scores])))
    return sweep


# -- report records -----------------------------------------------------------


class SampleMetrics(BaseModel):
    name: str
    mae: float
    psnr: float
    ssim: float
    mae_v: float
    psnr_v: float
    ssim_v: float
    vd_gt: float
    vd_pred: float
    vde: float
    vdc: float
    mae_proj: float
    psnr_proj: float
    ssim_proj: float
    psnr_capped_bscans: int = 0
    vdc_degenerate: bool = False


class ReportFlags(BaseModel):
    degenerate_vdc_pairs: int = 0
    psnr_capped_bscans: int = 0
    density_cropped: bool = False


class MetricsReport(BaseModel):
    """Per-sample and aggregate evaluation record; aggregates are arithmetic means over N."""

    model_config = ConfigDict(extra="forbid")

    n: int
    gamma: float
    patch_size: int
    samples: list[SampleMetrics]
    aggregate: dict[str, float]
    flags: ReportFlags
    config_hash: str = ""
    dataset_hash: str = ""
    source: str = ""
    reference: dict[str, dict[str, float]] = Field(default_factory=lambda: dict(PUBLISHED_REFERENCE))
    reference_label: str = PUBLISHED_REFERENCE_LABEL


def score_sample(
    name: str,
    gt: Volume,
    pred: Volume,
    gt_mask: VesselMask,
    weighting: WeightingConfig,
    patch: int = DEFAULT_PATCH,
    cap: float = PSNR_CAP,
) -> SampleMetrics:
    """All metrics for one (ground truth, prediction) volume pair."""
    gt_map, pred_map = project_mean(gt), project_mean(pred)
    weighted = weighted_metric_suite(gt_map, pred_map, gt_mask, weighting, cap)
    vd_gt = vessel_density(segment_global_mean_threshold(gt_map))
    vd_pred = vessel_density(segment_global_mean_threshold(pred_map))
    correlation = vdc_detailed([gt_map], [pred_map], patch)
    return SampleMetrics(
        name=name,
        mae=mae_volume(gt, pred),
        psnr=psnr_volume(gt, pred, cap),
        ssim=ssim_volume(gt, pred),
        mae_v=weighted.mae_v,
        psnr_v=weighted.psnr_v,
        ssim_v=weighted.ssim_v,
        vd_gt=vd_gt,
        vd_pred=vd_pred,
        vde=abs(vd_pred - vd_gt),
        vdc=correlation.value,
        mae_proj=mae_2d(gt_map, pred_map),
        psnr_proj=psnr_2d(gt_map, pred_map, cap),
        ssim_proj=ssim_2d(gt_map, pred_map),
        psnr_capped_bscans=capped_bscans(gt, pred),
        vdc_degenerate=correlation.degenerate_pairs > 0,
    )


def aggregate(samples: Sequence[SampleMetrics]) -> dict[str, float]:
    if not samples:
        raise EmptySetError("cannot aggregate an empty test set")
    ordered = sorted(samples, key=lambda s: s.name)
    keys = [*METRIC_NAMES, "mae_proj", "psnr_proj", "ssim_proj"]
    return {k: float(np.mean([getattr(s, k) for s in ordered])) for k in keys}
