"""Stage 1: pretrain the vessel segmenter on ground-truth OCTA projections."""

from __future__ import annotations

import logging
import time

import torch
from torch import nn
from tqdm import tqdm

from core.checkpoints import save_checkpoint
from core.config import ExperimentConfig
from core.errors import ConfigError, ShapeError
from core.networks import build_segmenter
from core.phantom import PhantomDataset

from .common import (
    BestTracker,
    PairedTensors,
    StageResult,
    batch_indices,
    check_finite,
    configure_determinism,
    data_generator,
    load_state,
    make_optimizer,
    save_state,
    stage_seed,
    state_path,
    write_run_manifest,
)
from .train_log import EpochRecord, TrainLog, rng_digest

logger = logging.getLogger(__name__)

STAGE = "vseg"


def augment(
    maps: torch.Tensor, masks: torch.Tensor, crop: int | None, flip: bool, generator: torch.Generator
) -> tuple[torch.Tensor, torch.Tensor]:
    """Random crop and random horizontal/vertical flips, identical for maps and masks."""
    if crop is not None:
        L, W = maps.shape[-2:]
        top = int(torch.randint(0, L - crop + 1, (1,), generator=generator))
        left = int(torch.randint(0, W - crop + 1, (1,), generator=generator))
        maps = maps[..., top : top + crop, left : left + crop]
        masks = masks[..., top : top + crop, left : left + crop]
    if flip:
        for dim in (-1, -2):
            if float(torch.rand(1, generator=generator)) < 0.5:
                maps, masks = maps.flip(dim), masks.flip(dim)
    return maps, masks


def dice_score(logits: torch.Tensor, masks: torch.Tensor) -> float:
    predicted = (logits > 0).float()
    total = predicted.sum() + masks.sum()
    if total == 0:
        return 1.0
    return float(2.0 * (predicted * masks).sum() / total)


def _crop_size(config: ExperimentConfig, map_shape: tuple[int, int]) -> int | None:
    crop = config.vseg.crop_size
    factor = 2**config.models.vseg.n_downsamples
    if crop is None:
        return None
    if crop % factor:
        raise ConfigError(f"vseg.crop_size {crop} must be divisible by {factor}")
    if crop >= min(map_shape):
        logger.debug(f"vseg.crop_size {crop} >= map size {map_shape}; cropping disabled")
        return None
    return crop


def pretrain_vseg(config: ExperimentConfig, *, resume: bool = False, stop_after: int | None = None) -> StageResult:
    """
    Train the segmenter (OCTA projection -> vessel logits) with BCE and keep the best-validation checkpoint.

    ``stop_after`` ends this invocation after that epoch; a later ``resume=True`` call continues.

    Raises:
        EmptySetError: the train or validation split is empty
        NonFiniteLossError: a loss became NaN or infinite
    """
    configure_determinism(config.run)
    run_dir = config.run_dir()
    config_hash = config.config_hash()
    stage = config.vseg
    write_run_manifest(run_dir, "pretrain-vpg", config)

    dataset = PhantomDataset(config.dataset.path)
    train = PairedTensors.from_samples(dataset.require("train"))
    val = PairedTensors.from_samples(dataset.require("val"))
    if float(train.masks.sum()) == 0.0:
        logger.warning("All training vessel masks are empty; segmenter labels are degenerate")

    map_shape = tuple(train.octa.shape[2:4])
    factor = 2**config.models.vseg.n_downsamples
    if any(s % factor for s in map_shape):
        raise ShapeError(f"Projection maps {map_shape} are not divisible by {factor} for the segmenter")
    crop = _crop_size(config, map_shape)

    model = build_segmenter(config.models.vseg, seed=stage_seed(config, STAGE, "init"))
    optimizer = make_optimizer(model.parameters(), stage.optimizer)
    criterion = nn.BCEWithLogitsLoss()
    generator = data_generator(config, STAGE)
    log = TrainLog(run_dir / "logs" / "vseg_log.jsonl", STAGE, config_hash)
    state_file = state_path(run_dir, STAGE)
    checkpoint_dir = run_dir / "checkpoints" / "vseg"

    start, best = 0, BestTracker()
    if resume:
        start, best = load_state(
            state_file, models={"vseg": model}, optimizers={"vseg": optimizer}, generator=generator, config_hash=config_hash
        )
    log.truncate(start)

    last = stage.epochs if stop_after is None else min(stop_after, stage.epochs)
    for epoch in tqdm(range(start + 1, last + 1), desc="vseg", disable=not config.run.progress):
        began = time.perf_counter()
        model.train()
        losses = []
        for step, idx in enumerate(batch_indices(len(train), stage.batch_size, generator)):
            maps, masks = augment(train.octa_maps[idx], train.masks[idx], crop, config.vseg.flip, generator)
            loss = criterion(model(maps), masks)
            check_finite(loss, "segmenter BCE", epoch, step)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            losses.append(loss.item())

        val_bce, dice = None, None
        if epoch % stage.val_every == 0 or epoch == stage.epochs:
            with torch.no_grad():
                logits = model(val.octa_maps)
                val_bce = criterion(logits, val.masks).item()
                dice = dice_score(logits, val.masks)
            if best.update(epoch, val_bce):
                save_checkpoint(
                    model,
                    checkpoint_dir,
                    role="vseg",
                    spec=config.models.vseg,
                    epoch=epoch,
                    val_metric="val_bce",
                    val_score=val_bce,
                    config_hash=config_hash,
                )

        save_state(
            state_file,
            epoch=epoch,
            models={"vseg": model},
            optimizers={"vseg": optimizer},
            generator=generator,
            best=best,
            config_hash=config_hash,
        )
        log.append(
            EpochRecord(
                stage=STAGE,
                epoch=epoch,
                losses={"bce": sum(losses) / len(losses)},
                val_metric="val_bce",
                val_score=val_bce,
                extra={"val_dice": dice} if dice is not None else {},
                wall_clock=time.perf_counter() - began,
                seed_digest=rng_digest(generator),
                config_hash=config_hash,
            )
        )
        logger.debug(f"vseg epoch {epoch}: bce {losses[-1]:.4f}, val_bce {val_bce}, dice {dice}")

    logger.info(f"Segmenter pretraining done: best epoch {best.epoch}, val BCE {best.score:.4f}")
    return StageResult(STAGE, checkpoint_dir, best.epoch, best.score, log.path, config_hash)
