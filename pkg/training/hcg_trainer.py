"""Stage 2: pretrain the 2D projection translator Gpre as a conditional GAN (adversarial + L1)."""

from __future__ import annotations

import logging
import time

import torch
from tqdm import tqdm

from core.checkpoints import save_checkpoint
from core.config import ExperimentConfig
from core.errors import ShapeError
from core.losses import discriminator_step_loss, generator_adv_loss, l1_mean
from core.networks import build_discriminator, build_generator
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
    set_requires_grad,
    stage_seed,
    state_path,
    write_run_manifest,
)
from .train_log import EpochRecord, TrainLog, rng_digest

logger = logging.getLogger(__name__)

STAGE = "hcg"


def pretrain_hcg(config: ExperimentConfig, *, resume: bool = False, stop_after: int | None = None) -> StageResult:
    """
    Train Gpre (OCT projection -> OCTA projection) against a conditional patch discriminator.

    The generator objective is ``adv + l1_weight * L1``; the checkpoint with the lowest
    validation map MAE is kept.
    """
    configure_determinism(config.run)
    run_dir = config.run_dir()
    config_hash = config.config_hash()
    stage = config.hcg
    write_run_manifest(run_dir, "pretrain-hcg", config)

    dataset = PhantomDataset(config.dataset.path)
    train = PairedTensors.from_samples(dataset.require("train"))
    val = PairedTensors.from_samples(dataset.require("val"))
    train_oct, train_octa = train.oct_maps, train.octa_maps
    val_oct, val_octa = val.oct_maps, val.octa_maps

    factor = max(2**config.models.gpre.n_downsamples, 2**config.models.dpre.n_strided_layers)
    if any(s % factor for s in train_octa.shape[2:]):
        raise ShapeError(f"Projection maps {tuple(train_octa.shape[2:])} are not divisible by {factor}")

    gpre = build_generator(config.models.gpre, seed=stage_seed(config, STAGE, "gpre"))
    dpre = build_discriminator(config.models.dpre, seed=stage_seed(config, STAGE, "dpre"))
    opt_g = make_optimizer(gpre.parameters(), stage.optimizer)
    opt_d = make_optimizer(dpre.parameters(), stage.optimizer)
    generator = data_generator(config, STAGE)
    models = {"gpre": gpre, "dpre": dpre}
    optimizers = {"gpre": opt_g, "dpre": opt_d}

    log = TrainLog(run_dir / "logs" / "hcg_log.jsonl", STAGE, config_hash)
    state_file = state_path(run_dir, STAGE)
    checkpoint_dir = run_dir / "checkpoints" / "gpre"

    start, best = 0, BestTracker()
    if resume:
        start, best = load_state(state_file, models=models, optimizers=optimizers, generator=generator, config_hash=config_hash)
    log.truncate(start)

    last = stage.epochs if stop_after is None else min(stop_after, stage.epochs)
    for epoch in tqdm(range(start + 1, last + 1), desc="hcg", disable=not config.run.progress):
        began = time.perf_counter()
        sums = {"d": 0.0, "g_adv": 0.0, "g_l1": 0.0, "g_total": 0.0}
        batches = batch_indices(len(train), stage.batch_size, generator)
        for step, idx in enumerate(batches):
            x, y = train_oct[idx], train_octa[idx]
            fake = gpre(x)

            set_requires_grad(dpre, True)
            d_loss = discriminator_step_loss(dpre(y, condition=x), dpre(fake.detach(), condition=x))
            check_finite(d_loss, "Dpre loss", epoch, step)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()

            set_requires_grad(dpre, False)
            adv = generator_adv_loss(dpre(fake, condition=x))
            l1 = l1_mean(fake, y)
            g_loss = adv + stage.l1_weight * l1
            check_finite(g_loss, "Gpre loss", epoch, step)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums["d"] += d_loss.item()
            sums["g_adv"] += adv.item()
            sums["g_l1"] += l1.item()
            sums["g_total"] += g_loss.item()
        set_requires_grad(dpre, True)

        val_mae = None
        if epoch % stage.val_every == 0 or epoch == stage.epochs:
            with torch.no_grad():
                val_mae = l1_mean(gpre(val_oct), val_octa).item()
            if best.update(epoch, val_mae):
                save_checkpoint(
                    gpre,
                    checkpoint_dir,
                    role="gpre",
                    spec=config.models.gpre,
                    epoch=epoch,
                    val_metric="val_mae",
                    val_score=val_mae,
                    config_hash=config_hash,
                )

        save_state(
            state_file, epoch=epoch, models=models, optimizers=optimizers, generator=generator, best=best, config_hash=config_hash
        )
        log.append(
            EpochRecord(
                stage=STAGE,
                epoch=epoch,
                losses={k: v / len(batches) for k, v in sums.items()},
                val_metric="val_mae",
                val_score=val_mae,
                val_mae=val_mae,
                wall_clock=time.perf_counter() - began,
                seed_digest=rng_digest(generator),
                config_hash=config_hash,
            )
        )

    save_checkpoint(dpre, run_dir / "checkpoints" / "dpre", role="dpre", spec=config.models.dpre, epoch=last, config_hash=config_hash)
    logger.info(f"HCG pretraining done: best epoch {best.epoch}, val MAE {best.score:.4f}")
    return StageResult(STAGE, checkpoint_dir, best.epoch, best.score, log.path, config_hash)
