"""Guidance ablation (baseline / +VPG / +HCG / full) over a seed bundle, and the alpha=beta weight sweep."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from core.config import ExperimentConfig
from core.evaluation import evaluate_testset, write_comparison
from core.utils import write_canonical_json

from .common import write_run_manifest
from .hcg_trainer import pretrain_hcg
from .transpro_trainer import train_transpro
from .vseg_trainer import pretrain_vseg

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Variant:
    slug: str
    label: str
    use_vpg: bool
    use_hcg: bool


VARIANTS: tuple[Variant, ...] = (
    Variant("baseline", "3D GAN", use_vpg=False, use_hcg=False),
    Variant("vpg", "+VPG", use_vpg=True, use_hcg=False),
    Variant("hcg", "+HCG", use_vpg=False, use_hcg=True),
    Variant("full", "TransPro", use_vpg=True, use_hcg=True),
)


@dataclass
class ComparisonRow:
    label: str
    seed: int
    run_dir: Path
    metrics: dict[str, float]


@dataclass
class AblationResult:
    rows: list[ComparisonRow] = field(default_factory=list)
    vdc_wins: int = 0
    vde_wins: int = 0
    n_seeds: int = 0

    def seed_rows(self, seed: int) -> list[ComparisonRow]:
        return [r for r in self.rows if r.seed == seed]


def variant_config(config: ExperimentConfig, variant: Variant, output_root: Path) -> ExperimentConfig:
    w = config.weights
    weights = w.model_copy(update={"alpha": w.alpha if variant.use_vpg else 0.0, "beta": w.beta if variant.use_hcg else 0.0})
    return config.with_overrides(output_root=output_root, name=variant.slug, weights=weights)


def _pretrain_guidance(config: ExperimentConfig) -> tuple[Path, Path]:
    vseg = pretrain_vseg(config)
    hcg = pretrain_hcg(config)
    return vseg.checkpoint_dir, hcg.checkpoint_dir


def _train_and_score(config: ExperimentConfig, vseg_ckpt: Path, gpre_ckpt: Path) -> dict[str, float]:
    train_transpro(config, vseg_ckpt, gpre_ckpt)
    report = evaluate_testset(
        config.run_dir(),
        config.dataset.path,
        evaluation=config.evaluation,
        config_hash=config.config_hash(),
        workers=config.run.num_workers,
    )
    return report.aggregate


def run_ablation(config: ExperimentConfig, seeds: Sequence[int] | None = None) -> AblationResult:
    """
    Train the four guidance variants per seed on shared pretrained guidance and compare them.

    Every seed gets its own guidance pretraining under ``<run>/ablation/seed_<s>/guidance``;
    the four variants of that seed reuse it.
    """
    seeds = list(seeds if seeds is not None else config.ablation.seeds)
    root = config.run_dir() / "ablation"
    write_run_manifest(config.run_dir(), "ablate", config, {"seeds": seeds})
    result = AblationResult(n_seeds=len(seeds))

    for seed in seeds:
        seed_root = root / f"seed_{seed}"
        seed_config = config.with_overrides(seed=seed, output_root=seed_root, name="guidance")
        vseg_ckpt, gpre_ckpt = _pretrain_guidance(seed_config)
        for variant in VARIANTS:
            vcfg = variant_config(seed_config, variant, seed_root)
            logger.info(f"Ablation seed {seed}: training {variant.label}")
            metrics = _train_and_score(vcfg, vseg_ckpt, gpre_ckpt)
            result.rows.append(ComparisonRow(variant.label, seed, vcfg.run_dir(), metrics))

        by_label = {r.label: r.metrics for r in result.seed_rows(seed)}
        full, baseline = by_label["TransPro"], by_label["3D GAN"]
        result.vdc_wins += int(full["vdc"] >= baseline["vdc"])
        result.vde_wins += int(full["vde"] <= baseline["vde"])
        write_comparison([(label, by_label[label]) for label in by_label], seed_root, "ablation")

    labelled = [(f"{r.label} (seed {r.seed})", r.metrics) for r in result.rows]
    table = write_comparison(labelled, root, "ablation")
    write_canonical_json(
        root / "directional.json",
        {"seeds": seeds, "vdc_full_ge_baseline": result.vdc_wins, "vde_full_le_baseline": result.vde_wins},
    )
    logger.info(f"Ablation done over {len(seeds)} seed(s); VDC wins {result.vdc_wins}, VDE wins {result.vde_wins}\n{table}")
    return result


def sweep_weights(config: ExperimentConfig, values: Sequence[float] | None = None) -> list[tuple[str, dict[str, float]]]:
    """Train the full model with alpha = beta = v for each v and tabulate all metrics."""
    values = list(values if values is not None else config.ablation.weight_values)
    root = config.run_dir() / "weight_sweep"
    write_run_manifest(config.run_dir(), "sweep-weights", config, {"values": values})
    vseg_ckpt, gpre_ckpt = _pretrain_guidance(config.with_overrides(output_root=root, name="guidance"))

    rows: list[tuple[str, dict[str, float]]] = []
    for v in values:
        weights = config.weights.model_copy(update={"alpha": float(v), "beta": float(v)})
        vcfg = config.with_overrides(output_root=root, name=f"weights_{v:g}", weights=weights)
        rows.append((f"alpha=beta={v:g}", _train_and_score(vcfg, vseg_ckpt, gpre_ckpt)))

    write_comparison(rows, root, "weight_sweep")
    return rows
