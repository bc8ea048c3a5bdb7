"""Stage 3: adversarial 3D translation with projection consistency and frozen HCG/VPG guidance."""

from __future__ import annotations

import logging
import time
from pathlib import Path

import torch
from torch import nn
from tqdm import tqdm

from core.checkpoints import LoaderRegistry, load_checkpoint, parameter_digest, save_checkpoint
from core.config import ExperimentConfig
from core.errors import CheckpointError, ConfigError, GuidanceMismatchError, ShapeError
from core.losses import (
    GeneratorLossTerms,
    discriminator_step_loss,
    generator_adv_loss,
    loss_HCG,
    loss_L12d,
    loss_L13d,
    loss_VPG,
    total_generator_loss,
)
from core.metrics import mae_volume
from core.networks import build_discriminator, build_generator
from core.phantom import PhantomDataset
from core.volumes import project_tensor

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

STAGE = "transpro"
LOSS_KEYS = ("d3d", "d2d", "adv3d", "adv2d", "l13d", "l12d", "vpg", "hcg", "total")


def _load_guidance(
    ckpt: Path | None, role: str, weight: float, map_shape: tuple[int, int], registry: LoaderRegistry
) -> nn.Module | None:
    if ckpt is None:
        if weight > 0:
            raise ConfigError(f"A {role} checkpoint is required when its loss weight is {weight}")
        return None
    try:
        model, manifest = load_checkpoint(ckpt, expected_role=role, frozen=True, registry=registry)  # type: ignore[arg-type]
    except CheckpointError as exc:
        raise GuidanceMismatchError(f"Cannot use {ckpt} as {role} guidance: {exc}") from exc
    factor = 2 ** int(manifest.spec["n_downsamples"])
    if any(s % factor for s in map_shape):
        raise GuidanceMismatchError(f"{role} checkpoint needs maps divisible by {factor}; dataset maps are {map_shape}")
    probe = torch.zeros(1, 1, *map_shape)
    with torch.no_grad():
        out = model(probe)
    if tuple(out.shape) != tuple(probe.shape):
        raise GuidanceMismatchError(f"{role} output shape {tuple(out.shape)} does not match maps {tuple(probe.shape)}")
    return model


def validation_mae(g3d: nn.Module, oct: torch.Tensor, octa: torch.Tensor) -> float:
    """Per-B-scan volume MAE averaged over the validation set."""
    scores = []
    with torch.no_grad():
        for i in range(oct.shape[0]):
            pred = g3d(oct[i : i + 1]).clamp(0.0, 1.0)
            scores.append(mae_volume(octa[i, 0].numpy(), pred[0, 0].numpy()))
    return sum(scores) / len(scores)


def generator_terms(
    config: ExperimentConfig,
    x: torch.Tensor,
    y: torch.Tensor,
    yhat: torch.Tensor,
    d3d: nn.Module,
    d2d: nn.Module,
    vseg: nn.Module | None,
    gpre: nn.Module | None,
) -> GeneratorLossTerms:
    """Every generator loss term; guidance terms with zero weight are not computed."""
    terms = GeneratorLossTerms(
        adv3d=generator_adv_loss(d3d(yhat)),
        adv2d=generator_adv_loss(d2d(project_tensor(yhat))),
        l13d=loss_L13d(y, yhat),
        l12d=loss_L12d(y, yhat),
    )
    w = config.weights
    if w.alpha > 0 and vseg is not None:
        terms.vpg = loss_VPG(vseg(project_tensor(yhat)), vseg(project_tensor(y)), config.switches.vpg_space)
    if w.beta > 0 and gpre is not None:
        terms.hcg = loss_HCG(gpre(project_tensor(x)), yhat, config.switches.hcg_loss)
    return terms


def train_transpro(
    config: ExperimentConfig,
    vseg_ckpt: Path | None = None,
    gpre_ckpt: Path | None = None,
    *,
    resume: bool = False,
    stop_after: int | None = None,
) -> StageResult:
    """
    Alternate D3d, D2d and G3d updates each iteration and keep the epoch with the lowest validation MAE.

    Guidance checkpoints default to ``<run>/checkpoints/{vseg,gpre}``. Both are loaded frozen and
    their parameter digests are compared before and after training.

    Raises:
        GuidanceMismatchError: a guidance checkpoint is unusable with this dataset
        NonFiniteLossError: a loss became NaN or infinite
        CheckpointError: frozen guidance parameters changed during training
    """
    configure_determinism(config.run)
    run_dir = config.run_dir()
    config_hash = config.config_hash()
    stage = config.transpro
    w = config.weights

    dataset = PhantomDataset(config.dataset.path)
    train = PairedTensors.from_samples(dataset.require("train"))
    val = PairedTensors.from_samples(dataset.require("val"))
    volume_shape = tuple(train.oct.shape[2:])
    map_shape = volume_shape[:2]
    factor = max(2**config.models.g3d.n_downsamples, 2**config.models.d3d.n_strided_layers)
    if any(s % factor for s in volume_shape):
        raise ShapeError(f"Volumes {volume_shape} are not divisible by {factor} for G3d/D3d")

    default_ckpts = run_dir / "checkpoints"
    vseg_ckpt = vseg_ckpt if vseg_ckpt is not None else _existing(default_ckpts / "vseg")
    gpre_ckpt = gpre_ckpt if gpre_ckpt is not None else _existing(default_ckpts / "gpre")
    registry = LoaderRegistry()
    vseg = _load_guidance(vseg_ckpt, "vseg", w.alpha, map_shape, registry)
    gpre = _load_guidance(gpre_ckpt, "gpre", w.beta, map_shape, registry)
    frozen_before = {name: parameter_digest(m) for name, m in (("vseg", vseg), ("gpre", gpre)) if m is not None}
    write_run_manifest(
        run_dir,
        "train",
        config,
        {"guidance": registry.loaded, "frozen_digests": frozen_before},
    )

    g3d = build_generator(config.models.g3d, seed=stage_seed(config, STAGE, "g3d"))
    d3d = build_discriminator(config.models.d3d, seed=stage_seed(config, STAGE, "d3d"))
    d2d = build_discriminator(config.models.d2d, seed=stage_seed(config, STAGE, "d2d"))
    opt_g = make_optimizer(g3d.parameters(), stage.optimizer)
    opt_d3 = make_optimizer(d3d.parameters(), stage.optimizer)
    opt_d2 = make_optimizer(d2d.parameters(), stage.optimizer)
    generator = data_generator(config, STAGE)
    models = {"g3d": g3d, "d3d": d3d, "d2d": d2d}
    optimizers = {"g3d": opt_g, "d3d": opt_d3, "d2d": opt_d2}

    log = TrainLog(run_dir / "logs" / "train_log.jsonl", STAGE, config_hash)
    state_file = state_path(run_dir, STAGE)
    checkpoint_dir = default_ckpts / "g3d"

    start, best = 0, BestTracker()
    if resume:
        start, best = load_state(state_file, models=models, optimizers=optimizers, generator=generator, config_hash=config_hash)
    log.truncate(start)

    last = stage.epochs if stop_after is None else min(stop_after, stage.epochs)
    for epoch in tqdm(range(start + 1, last + 1), desc="transpro", disable=not config.run.progress):
        began = time.perf_counter()
        sums = dict.fromkeys(LOSS_KEYS, 0.0)
        batches = batch_indices(len(train), stage.batch_size, generator)
        for step, idx in enumerate(batches):
            x, y = train.oct[idx], train.octa[idx]
            yhat = g3d(x)

            set_requires_grad(d3d, True)
            d3_loss = discriminator_step_loss(d3d(y), d3d(yhat.detach()))
            check_finite(d3_loss, "D3d loss", epoch, step)
            opt_d3.zero_grad()
            d3_loss.backward()
            opt_d3.step()

            set_requires_grad(d2d, True)
            d2_loss = discriminator_step_loss(d2d(project_tensor(y)), d2d(project_tensor(yhat).detach()))
            check_finite(d2_loss, "D2d loss", epoch, step)
            opt_d2.zero_grad()
            d2_loss.backward()
            opt_d2.step()

            set_requires_grad(d3d, False)
            set_requires_grad(d2d, False)
            terms = generator_terms(config, x, y, yhat, d3d, d2d, vseg, gpre)
            g_loss = total_generator_loss(terms, w)
            check_finite(g_loss, "G3d total loss", epoch, step)
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()

            sums["d3d"] += d3_loss.item()
            sums["d2d"] += d2_loss.item()
            for key, value in terms.as_floats().items():
                sums[key] += value
            sums["total"] += float(g_loss)
        set_requires_grad(d3d, True)
        set_requires_grad(d2d, True)

        val_mae = None
        if epoch % stage.val_every == 0 or epoch == stage.epochs:
            val_mae = validation_mae(g3d, val.oct, val.octa)
            if best.update(epoch, val_mae):
                save_checkpoint(
                    g3d,
                    checkpoint_dir,
                    role="g3d",
                    spec=config.models.g3d,
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
        logger.debug(f"transpro epoch {epoch}: total {sums['total'] / len(batches):.4f}, val_mae {val_mae}")

    frozen_after = {name: parameter_digest(m) for name, m in (("vseg", vseg), ("gpre", gpre)) if m is not None}
    if frozen_after != frozen_before:
        raise CheckpointError("Frozen guidance parameters changed during training")
    for role, model, spec in (("d3d", d3d, config.models.d3d), ("d2d", d2d, config.models.d2d)):
        save_checkpoint(model, default_ckpts / role, role=role, spec=spec, epoch=last, config_hash=config_hash)  # type: ignore[arg-type]

    logger.info(f"TransPro training done: best epoch {best.epoch}, val MAE {best.score:.4f}")
    return StageResult(
        STAGE,
        checkpoint_dir,
        best.epoch,
        best.score,
        log.path,
        config_hash,
        frozen_digests={k: (frozen_before[k], frozen_after[k]) for k in frozen_before},
    )


def _existing(path: Path) -> Path | None:
    return path if (path / "manifest.json").exists() else None
