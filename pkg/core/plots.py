"""Static PNG figures: gamma sweeps, projection triptychs and metric bar charts."""

from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import GammaSweep  # noqa: E402
from .volumes import ProjectionMap  # noqa: E402

_SWEEP_PANELS = (("mae_v", "MAE-V"), ("psnr_v", "PSNR-V (dB)"), ("ssim_v", "SSIM-V"))


def plot_gamma_sweep(sweeps: Mapping[str, GammaSweep], path: Path, title: str = "Vessel-weighted metrics vs gamma") -> None:
    """One panel per weighted metric, one line per labelled sweep."""
    fig, axes = plt.subplots(1, 3, figsize=(15, 4.5))
    for ax, (key, label) in zip(axes, _SWEEP_PANELS):
        for name, sweep in sweeps.items():
            ax.plot(sweep.gammas, getattr(sweep, key), marker="o", label=name)
        ax.set_xlabel("gamma")
        ax.set_ylabel(label)
        ax.invert_xaxis()
        ax.grid(alpha=0.3)
    axes[0].legend(fontsize=8)
    fig.suptitle(title)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_triptych(
    oct_map: ProjectionMap, pred_map: ProjectionMap, gt_map: ProjectionMap, path: Path, title: str = ""
) -> None:
    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
    for ax, (label, m) in zip(axes, (("OCT projection", oct_map), ("Translated OCTA", pred_map), ("Ground truth OCTA", gt_map))):
        ax.imshow(m.data, cmap="gray", vmin=0.0, vmax=1.0)
        ax.set_title(label)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)


def plot_metric_bars(rows: Sequence[tuple[str, Mapping[str, float]]], metrics: Sequence[str], path: Path) -> None:
    """Grouped bars: one subplot per metric, one bar per row label, in the given row order."""
    fig, axes = plt.subplots(1, len(metrics), figsize=(3.2 * len(metrics), 4), squeeze=False)
    labels = [label for label, _ in rows]
    for ax, metric in zip(axes[0], metrics):
        ax.bar(range(len(rows)), [values.get(metric, float("nan")) for _, values in rows])
        ax.set_xticks(range(len(rows)))
        ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=8)
        ax.set_title(metric.upper())
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=100, bbox_inches="tight")
    plt.close(fig)
