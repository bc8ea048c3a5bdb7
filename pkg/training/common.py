"""Plumbing shared by the training stages: determinism, optimizers, batching and resumable state."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import torch
from torch import nn

from core.config import ExperimentConfig, OptimizerConfig, RunConfig
from core.errors import CheckpointError, NonFiniteLossError
from core.phantom import StoredSample
from core.utils import derive_seed, write_canonical_json
from core.volumes import project_tensor

logger = logging.getLogger(__name__)

STATE_FILE = "state_last.pt"


def configure_determinism(run: RunConfig) -> None:
    if run.deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.set_num_threads(1)


def stage_seed(config: ExperimentConfig, stage: str, purpose: str) -> int:
    return derive_seed(config.run.seed, stage, purpose)


def data_generator(config: ExperimentConfig, stage: str) -> torch.Generator:
    return torch.Generator().manual_seed(stage_seed(config, stage, "data"))


def make_optimizer(params: Iterable[nn.Parameter], cfg: OptimizerConfig) -> torch.optim.Optimizer:
    if cfg.name == "rmsprop":
        return torch.optim.RMSprop(params, lr=cfg.lr, alpha=cfg.alpha, weight_decay=cfg.weight_decay)
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)


def set_requires_grad(model: nn.Module, flag: bool) -> None:
    for p in model.parameters():
        p.requires_grad_(flag)


def check_finite(value: torch.Tensor, what: str, epoch: int, step: int) -> None:
    if not torch.isfinite(value).all():
        raise NonFiniteLossError(f"{what} became non-finite ({value.item()}) at epoch {epoch}, step {step}")


def batch_indices(n: int, batch_size: int, generator: torch.Generator) -> list[list[int]]:
    """Seeded shuffle split into batches; the last batch may be short."""
    order = torch.randperm(n, generator=generator).tolist()
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class PairedTensors:
    """Stacked OCT/OCTA volumes with their projections and annotated masks, shape (N, 1, ...)."""

    names: list[str]
    oct: torch.Tensor
    octa: torch.Tensor
    masks: torch.Tensor

    @classmethod
    def from_samples(cls, samples: Sequence[StoredSample]) -> PairedTensors:
        return cls(
            names=[s.name for s in samples],
            oct=torch.stack([torch.from_numpy(s.oct.data.copy()) for s in samples])[:, None],
            octa=torch.stack([torch.from_numpy(s.octa.data.copy()) for s in samples])[:, None],
            masks=torch.stack([torch.from_numpy(s.vessel_mask.data.astype("float32")) for s in samples])[:, None],
        )

    def __len__(self) -> int:
        return len(self.names)

    @property
    def oct_maps(self) -> torch.Tensor:
        return project_tensor(self.oct)

    @property
    def octa_maps(self) -> torch.Tensor:
        return project_tensor(self.octa)


@dataclass
class BestTracker:
    epoch: int = 0
    score: float = math.inf

    def update(self, epoch: int, score: float) -> bool:
        if score < self.score:
            self.epoch, self.score = epoch, score
            return True
        return False


@dataclass
class StageResult:
    stage: str
    checkpoint_dir: Path
    best_epoch: int
    best_score: float
    log_path: Path
    config_hash: str
    frozen_digests: dict[str, tuple[str, str]] = field(default_factory=dict)


def state_path(run_dir: Path, stage: str) -> Path:
    return Path(run_dir) / "state" / stage / STATE_FILE


def save_state(
    path: Path,
    *,
    epoch: int,
    models: dict[str, nn.Module],
    optimizers: dict[str, torch.optim.Optimizer],
    generator: torch.Generator,
    best: BestTracker,
    config_hash: str,
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "epoch": epoch,
            "models": {k: m.state_dict() for k, m in models.items()},
            "optimizers": {k: o.state_dict() for k, o in optimizers.items()},
            "generator": generator.get_state(),
            "best_epoch": best.epoch,
            "best_score": best.score,
            "config_hash": config_hash,
        },
        path,
    )


def load_state(
    path: Path,
    *,
    models: dict[str, nn.Module],
    optimizers: dict[str, torch.optim.Optimizer],
    generator: torch.Generator,
    config_hash: str,
) -> tuple[int, BestTracker]:
    """Restore a stage from ``state_last.pt``; returns (completed epoch, best tracker)."""
    if not path.exists():
        raise CheckpointError(f"Resume state not found: {path}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    if state["config_hash"] != config_hash:
        raise CheckpointError(f"Resume state {path} was written under a different config ({state['config_hash'][:12]})")
    for key, model in models.items():
        model.load_state_dict(state["models"][key])
    for key, optimizer in optimizers.items():
        optimizer.load_state_dict(state["optimizers"][key])
    generator.set_state(state["generator"])
    logger.info(f"Resuming from {path} after epoch {state['epoch']}")
    return int(state["epoch"]), BestTracker(int(state["best_epoch"]), float(state["best_score"]))


def write_run_manifest(run_dir: Path, command: str, config: ExperimentConfig, extra: dict | None = None) -> None:
    """Every command records its resolved config and hash next to its outputs."""
    write_canonical_json(
        Path(run_dir) / "manifests" / f"{command}.json",
        {"command": command, "config": config.resolved(), "config_hash": config.config_hash(), **(extra or {})},
    )
