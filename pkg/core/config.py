"""Experiment configuration: TOML file -> validated pydantic models, plus the config hash."""

from __future__ import annotations

import logging
import os
import tomllib
from pathlib import Path
from typing import Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError
from .losses import HCGLoss, LossWeights, VPGSpace
from .metrics import DEFAULT_PATCH, GAMMA_SERIES, PSNR_CAP, SSIM_MIN_SIDE
from .networks import DiscriminatorSpec, GeneratorSpec, SegmenterSpec
from .phantom import PhantomConfig
from .utils import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "TRANSPRO_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = Path("runs")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RunConfig(_Section):
    name: str = "desk"
    output_root: Path | None = None
    seed: int = Field(default=0, ge=0)
    device: Literal["cpu"] = "cpu"
    deterministic: bool = True
    num_workers: int = Field(default=1, ge=1)
    progress: bool = False


class DatasetConfig(_Section):
    path: Path = Path("data/phantoms")
    n_train: int = Field(default=8, ge=0)
    n_val: int = Field(default=2, ge=0)
    n_test: int = Field(default=4, ge=0)
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)

    @model_validator(mode="after")
    def _scorable_shape(self) -> DatasetConfig:
        if min(self.phantom.shape) < SSIM_MIN_SIDE:
            raise ValueError(f"dataset.phantom.shape {self.phantom.shape} is too small to score; every side must be >= {SSIM_MIN_SIDE}")
        return self


class ModelsConfig(_Section):
    g3d: GeneratorSpec = Field(default_factory=lambda: GeneratorSpec(dims=3))
    d3d: DiscriminatorSpec = Field(default_factory=lambda: DiscriminatorSpec(dims=3))
    d2d: DiscriminatorSpec = Field(default_factory=lambda: DiscriminatorSpec(dims=2))
    gpre: GeneratorSpec = Field(default_factory=lambda: GeneratorSpec(dims=2))
    dpre: DiscriminatorSpec = Field(default_factory=lambda: DiscriminatorSpec(dims=2, conditional=True))
    vseg: SegmenterSpec = Field(default_factory=SegmenterSpec)

    @model_validator(mode="after")
    def _dimensionality(self) -> ModelsConfig:
        wrong = [
            name
            for name, spec, dims in (
                ("g3d", self.g3d, 3),
                ("d3d", self.d3d, 3),
                ("d2d", self.d2d, 2),
                ("gpre", self.gpre, 2),
                ("dpre", self.dpre, 2),
            )
            if spec.dims != dims
        ]
        if wrong:
            raise ValueError(f"model specs with the wrong dimensionality: {wrong}")
        if not self.dpre.conditional:
            raise ValueError("models.dpre must be conditional (it sees the OCT projection as well)")
        return self


class OptimizerConfig(_Section):
    name: Literal["adam", "rmsprop"] = "adam"
    lr: float = Field(default=2e-4, gt=0.0)
    betas: tuple[float, float] = (0.5, 0.999)
    alpha: float = Field(default=0.99, gt=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)


class StageConfig(_Section):
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=1, ge=1)
    val_every: int = Field(default=1, ge=1)


class VSegStageConfig(StageConfig):
    optimizer: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(name="rmsprop", lr=1e-5))
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=2, ge=1)
    crop_size: int | None = Field(default=48, ge=1)
    flip: bool = True


class HCGStageConfig(StageConfig):
    epochs: int = Field(default=40, ge=1)
    l1_weight: float = Field(default=100.0, ge=0.0)


class TransProStageConfig(StageConfig):
    epochs: int = Field(default=50, ge=1)


class SwitchesConfig(_Section):
    vpg_space: VPGSpace = "logits"
    hcg_loss: HCGLoss = "l1"


class EvaluationConfig(_Section):
    gamma: float = Field(default=0.1, gt=0.0, le=1.0)
    patch_size: int = Field(default=DEFAULT_PATCH, ge=1)
    gammas: tuple[float, ...] = GAMMA_SERIES
    psnr_cap: float = Field(default=PSNR_CAP, gt=0.0)
    triptychs: bool = True


class AblationConfig(_Section):
    seeds: tuple[int, ...] = (0, 1, 2)
    weight_values: tuple[float, ...] = (1.0, 3.0, 5.0, 7.0, 9.0)

    @model_validator(mode="after")
    def _non_empty(self) -> AblationConfig:
        if not self.seeds:
            raise ValueError("ablation.seeds must not be empty")
        if any(v < 0 for v in self.weight_values):
            raise ValueError("ablation.weight_values must be >= 0")
        return self


class ExperimentConfig(_Section):
    """Everything a run needs; hashing excludes where the run is written and what it is called."""

    run: RunConfig = Field(default_factory=RunConfig)
    dataset: DatasetConfig = Field(default_factory=DatasetConfig)
    models: ModelsConfig = Field(default_factory=ModelsConfig)
    vseg: VSegStageConfig = Field(default_factory=VSegStageConfig)
    hcg: HCGStageConfig = Field(default_factory=HCGStageConfig)
    transpro: TransProStageConfig = Field(default_factory=TransProStageConfig)
    weights: LossWeights = Field(default_factory=LossWeights)
    switches: SwitchesConfig = Field(default_factory=SwitchesConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)

    def config_hash(self) -> str:
        payload = self.model_dump(mode="json")
        payload["run"].pop("output_root", None)
        payload["run"].pop("name", None)
        return sha256_hex(canonical_json(payload))

    def output_root(self) -> Path:
        return self.run.output_root if self.run.output_root is not None else default_output_root()

    def run_dir(self) -> Path:
        return self.output_root() / self.run.name

    def with_overrides(
        self,
        *,
        seed: int | None = None,
        output_root: Path | None = None,
        name: str | None = None,
        dataset: Path | None = None,
        weights: LossWeights | None = None,
    ) -> ExperimentConfig:
        run_update: dict = {}
        if seed is not None:
            run_update["seed"] = seed
        if output_root is not None:
            run_update["output_root"] = Path(output_root)
        if name is not None:
            run_update["name"] = name
        update: dict = {"run": self.run.model_copy(update=run_update)}
        if dataset is not None:
            update["dataset"] = self.dataset.model_copy(update={"path": Path(dataset)})
        if weights is not None:
            update["weights"] = weights
        return self.model_copy(update=update)

    def resolved(self) -> dict:
        """JSON-ready dump with the effective output root filled in."""
        data = self.model_dump(mode="json")
        data["run"]["output_root"] = self.output_root().as_posix()
        return data


def default_output_root() -> Path:
    load_dotenv()
    value = os.getenv(OUTPUT_ROOT_ENV)
    return Path(value) if value else DEFAULT_OUTPUT_ROOT


def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid experiment config: {exc}") from exc


def load_config(
    path: Path | None,
    *,
    seed: int | None = None,
    output_root: Path | None = None,
    dataset: Path | None = None,
) -> ExperimentConfig:
    """
    Load a TOML experiment config and apply CLI overrides.

    Args:
        path: TOML file, or None for the built-in defaults
        seed: replaces ``run.seed`` before hashing
        output_root: replaces ``run.output_root``
        dataset: replaces ``dataset.path``

    Raises:
        FileNotFoundError: the config file does not exist
        ConfigError: malformed TOML, unknown keys or invalid values
    """
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        try:
            data = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"Malformed TOML in {path}: {exc}") from exc
    config = parse_config(data).with_overrides(seed=seed, output_root=output_root, dataset=dataset)
    logger.debug(f"Resolved config {config.config_hash()[:12]} from {path or 'defaults'}")
    return config
