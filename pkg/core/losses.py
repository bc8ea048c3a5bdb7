"""Training objectives as differentiable scalar functions of model outputs."""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Literal

import torch
from pydantic import BaseModel, ConfigDict, Field

from .errors import ShapeError
from .volumes import project_tensor

EPS = 1e-7

VPGSpace = Literal["logits", "probabilities"]
HCGLoss = Literal["l1", "mse"]


class LossWeights(BaseModel):
    """lambda1/lambda2 balance the voxel and projection L1 terms; alpha/beta weight VPG and HCG."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda1: float = Field(default=10.0, ge=0.0)
    lambda2: float = Field(default=10.0, ge=0.0)
    alpha: float = Field(default=5.0, ge=0.0)
    beta: float = Field(default=5.0, ge=0.0)


def _same_shape(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")


def l1_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean absolute difference over all elements."""
    _same_shape(a, b, "l1_mean")
    return (a - b).abs().mean()


def mse_mean(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    _same_shape(a, b, "mse_mean")
    return ((a - b) ** 2).mean()


def discriminator_step_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """-mean(log D(real)) - mean(log(1 - D(fake))) over the patch grid."""
    return -torch.log(real_scores + EPS).mean() - torch.log(1.0 - fake_scores + EPS).mean()


def generator_adv_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective -mean(log D(fake))."""
    return -torch.log(fake_scores + EPS).mean()


def loss_L13d(Y: torch.Tensor, Yhat: torch.Tensor) -> torch.Tensor:
    return l1_mean(Y, Yhat)


def loss_L12d(Y: torch.Tensor, Yhat: torch.Tensor) -> torch.Tensor:
    _same_shape(Y, Yhat, "loss_L12d")
    return l1_mean(project_tensor(Y), project_tensor(Yhat))


def loss_HCG(y_prime: torch.Tensor, Yhat: torch.Tensor, kind: HCGLoss = "l1") -> torch.Tensor:
    """Distance between the frozen 2D translator's map and the projected 3D output."""
    projected = project_tensor(Yhat)
    target = y_prime.detach()
    if kind == "mse":
        return mse_mean(target, projected)
    return l1_mean(target, projected)


def loss_VPG(l_hat: torch.Tensor, l_gt: torch.Tensor, space: VPGSpace = "logits") -> torch.Tensor:
    """L1 between segmenter outputs on translated and ground-truth projections."""
    target = l_gt.detach()
    if space == "probabilities":
        return l1_mean(torch.sigmoid(l_hat), torch.sigmoid(target))
    return l1_mean(l_hat, target)


@dataclass
class GeneratorLossTerms:
    adv3d: torch.Tensor | float = 0.0
    adv2d: torch.Tensor | float = 0.0
    l13d: torch.Tensor | float = 0.0
    l12d: torch.Tensor | float = 0.0
    vpg: torch.Tensor | float = 0.0
    hcg: torch.Tensor | float = 0.0

    def as_floats(self) -> dict[str, float]:
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: v.detach().item() if isinstance(v, torch.Tensor) else float(v) for k, v in values.items()}


def total_generator_loss(terms: GeneratorLossTerms, w: LossWeights) -> torch.Tensor | float:
    """adv3d + adv2d + lambda1*L13d + lambda2*L12d + alpha*VPG + beta*HCG."""
    return (
        terms.adv3d
        + terms.adv2d
        + w.lambda1 * terms.l13d
        + w.lambda2 * terms.l12d
        + w.alpha * terms.vpg
        + w.beta * terms.hcg
    )
