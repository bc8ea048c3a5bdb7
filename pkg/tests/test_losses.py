"""Tests for the training objectives."""

from __future__ import annotations

import math
import warnings

import pytest
import torch

from core.errors import ShapeError
from core.losses import (
    GeneratorLossTerms,
    LossWeights,
    discriminator_step_loss,
    generator_adv_loss,
    l1_mean,
    loss_HCG,
    loss_L12d,
    loss_L13d,
    loss_VPG,
    total_generator_loss,
)


@pytest.fixture
def volume_pair() -> tuple[torch.Tensor, torch.Tensor]:
    gen = torch.Generator().manual_seed(5)
    return torch.rand(2, 1, 8, 8, 4, generator=gen), torch.rand(2, 1, 8, 8, 4, generator=gen)


def test_identical_inputs_give_zero(volume_pair) -> None:
    y, _ = volume_pair
    assert loss_L13d(y, y.clone()).item() == 0.0
    assert loss_L12d(y, y.clone()).item() == 0.0
    assert loss_HCG(y.mean(dim=-1), y.clone()).item() == 0.0
    assert loss_HCG(y.mean(dim=-1), y.clone(), kind="mse").item() == 0.0
    logits = torch.randn(2, 1, 8, 8)
    assert loss_VPG(logits, logits.clone()).item() == 0.0
    assert loss_VPG(logits, logits.clone(), space="probabilities").item() == 0.0


def test_l13d_matches_loop_oracle(volume_pair) -> None:
    y, y_hat = volume_pair
    flat_a, flat_b = y.reshape(-1).tolist(), y_hat.reshape(-1).tolist()
    oracle = sum(abs(a - b) for a, b in zip(flat_a, flat_b)) / len(flat_a)
    assert loss_L13d(y, y_hat).item() == pytest.approx(oracle, abs=1e-6)


def test_l12d_compares_projections(volume_pair) -> None:
    y, y_hat = volume_pair
    expected = (y.mean(dim=-1) - y_hat.mean(dim=-1)).abs().mean()
    assert torch.allclose(loss_L12d(y, y_hat), expected)
    # depth permutation leaves the projection, and so the loss, unchanged
    shuffled = y_hat[..., torch.tensor([3, 0, 2, 1])]
    assert torch.allclose(loss_L12d(y, shuffled), loss_L12d(y, y_hat), atol=1e-7)


def test_shape_mismatch_raises(volume_pair) -> None:
    y, _ = volume_pair
    with pytest.raises(ShapeError):
        loss_L13d(y, y[..., :2])
    with pytest.raises(ShapeError):
        l1_mean(torch.zeros(3), torch.zeros(4))


def test_discriminator_loss_at_half_scores() -> None:
    half = torch.full((1, 1, 8, 8, 4), 0.5)
    assert discriminator_step_loss(half, half).item() == pytest.approx(2 * math.log(2), abs=1e-6)


def test_discriminator_loss_matches_loop_oracle() -> None:
    gen = torch.Generator().manual_seed(2)
    real = torch.rand(1, 1, 4, 4, generator=gen) * 0.98 + 0.01
    fake = torch.rand(1, 1, 4, 4, generator=gen) * 0.98 + 0.01
    r, f = real.reshape(-1).tolist(), fake.reshape(-1).tolist()
    oracle = -sum(math.log(x) for x in r) / len(r) - sum(math.log(1 - x) for x in f) / len(f)
    assert discriminator_step_loss(real, fake).item() == pytest.approx(oracle, abs=1e-4)


def test_generator_adversarial_loss() -> None:
    half = torch.full((1, 1, 8, 8), 0.5)
    assert generator_adv_loss(half).item() == pytest.approx(math.log(2), abs=1e-6)
    gen = torch.Generator().manual_seed(3)
    fake = torch.rand(1, 1, 4, 4, generator=gen) * 0.98 + 0.01
    values = fake.reshape(-1).tolist()
    assert generator_adv_loss(fake).item() == pytest.approx(-sum(math.log(v) for v in values) / len(values), abs=1e-4)


def test_guidance_targets_are_detached(volume_pair) -> None:
    y, y_hat = volume_pair
    y_hat = y_hat.clone().requires_grad_(True)
    y_prime = y.mean(dim=-1).clone().requires_grad_(True)
    loss_HCG(y_prime, y_hat).backward()
    assert y_prime.grad is None
    assert y_hat.grad is not None

    l_hat = torch.randn(1, 1, 8, 8, requires_grad=True)
    l_gt = torch.randn(1, 1, 8, 8, requires_grad=True)
    loss_VPG(l_hat, l_gt).backward()
    assert l_gt.grad is None
    assert l_hat.grad is not None


def test_default_weights() -> None:
    w = LossWeights()
    assert (w.lambda1, w.lambda2, w.alpha, w.beta) == (10.0, 10.0, 5.0, 5.0)
    with pytest.raises(ValueError):
        LossWeights(alpha=-1.0)


def test_total_generator_loss_weighting() -> None:
    terms = GeneratorLossTerms(adv3d=1.0, adv2d=2.0, l13d=0.1, l12d=0.2, vpg=0.3, hcg=0.4)
    assert total_generator_loss(terms, LossWeights()) == pytest.approx(1.0 + 2.0 + 1.0 + 2.0 + 1.5 + 2.0)
    zero_guidance = LossWeights(alpha=0.0, beta=0.0)
    assert total_generator_loss(terms, zero_guidance) == pytest.approx(6.0)
    assert terms.as_floats() == {"adv3d": 1.0, "adv2d": 2.0, "l13d": 0.1, "l12d": 0.2, "vpg": 0.3, "hcg": 0.4}


def test_loss_switches_change_the_distance() -> None:
    gen = torch.Generator().manual_seed(11)
    target_map = torch.rand(1, 1, 8, 8, generator=gen)
    yhat = torch.rand(1, 1, 8, 8, 4, generator=gen)
    diff = target_map - yhat.mean(dim=-1)
    assert loss_HCG(target_map, yhat, kind="mse").item() == pytest.approx((diff**2).mean().item(), abs=1e-7)
    l_hat, l_gt = torch.randn(1, 1, 8, 8, generator=gen), torch.randn(1, 1, 8, 8, generator=gen)
    expected = (torch.sigmoid(l_hat) - torch.sigmoid(l_gt)).abs().mean().item()
    assert loss_VPG(l_hat, l_gt, space="probabilities").item() == pytest.approx(expected, abs=1e-7)
    assert loss_VPG(l_hat, l_gt).item() == pytest.approx((l_hat - l_gt).abs().mean().item(), abs=1e-7)


def test_as_floats_reads_live_terms_without_warnings() -> None:
    weight = torch.tensor(2.0, requires_grad=True)
    terms = GeneratorLossTerms(adv3d=weight * 0.5, l13d=weight * 0.25, hcg=0.1)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        values = terms.as_floats()
    assert values["adv3d"] == pytest.approx(1.0)
    assert values["l13d"] == pytest.approx(0.5)
    assert values["hcg"] == pytest.approx(0.1)
    assert weight.grad is None
