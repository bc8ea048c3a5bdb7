"""Generators, patch discriminators and the vessel segmenter, plus a finite-difference gradient probe."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Literal

import torch
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .errors import NonFiniteLossError, ShapeError

logger = logging.getLogger(__name__)


class GeneratorSpec(BaseModel):
    """UNet translator; ``dims=3`` is G3d, ``dims=2`` is the projection-map translator Gpre."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dims: Literal[2, 3] = 3
    in_channels: Literal[1] = 1
    out_channels: Literal[1] = 1
    base_channels: int = Field(default=16, ge=1)
    n_downsamples: int = Field(default=3, ge=1)
    max_channels: int = Field(default=128, ge=1)
    skip_connections: bool = True
    output_squash: Literal["sigmoid"] = "sigmoid"


class DiscriminatorSpec(BaseModel):
    """Patch discriminator producing a grid of probabilities."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dims: Literal[2, 3] = 3
    in_channels: Literal[1] = 1
    base_channels: int = Field(default=16, ge=1)
    n_strided_layers: int = Field(default=3, ge=1)
    max_channels: int = Field(default=128, ge=1)
    conditional: bool = False


class SegmenterSpec(BaseModel):
    """2D UNet emitting raw (pre-sigmoid) vessel logits."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    base_channels: int = Field(default=16, ge=1)
    n_downsamples: int = Field(default=3, ge=1)
    max_channels: int = Field(default=128, ge=1)


def _layers(dims: int) -> tuple[type[nn.Module], type[nn.Module], type[nn.Module]]:
    if dims == 3:
        return nn.Conv3d, nn.ConvTranspose3d, nn.InstanceNorm3d
    return nn.Conv2d, nn.ConvTranspose2d, nn.InstanceNorm2d


def _check_spatial(x: torch.Tensor, dims: int, factor: int, what: str) -> None:
    if x.ndim != dims + 2:
        raise ShapeError(f"{what} expects a (N, C, {'L, W, D' if dims == 3 else 'L, W'}) tensor, got {tuple(x.shape)}")
    spatial = tuple(x.shape[2:])
    if any(s % factor for s in spatial):
        raise ShapeError(f"{what}: spatial shape {spatial} must be divisible by {factor}")


class UNet(nn.Module):
    """pix2pix-style UNet: stride-2 conv encoder, transposed-conv decoder, optional skip concatenation."""

    def __init__(
        self,
        dims: int,
        in_channels: int,
        out_channels: int,
        base_channels: int,
        n_downsamples: int,
        max_channels: int,
        skip_connections: bool,
        squash: bool,
    ) -> None:
        super().__init__()
        conv, conv_t, norm = _layers(dims)
        self.dims = dims
        self.n_downsamples = n_downsamples
        self.skip_connections = skip_connections
        self.squash = squash

        self.stem = nn.Sequential(conv(in_channels, base_channels, 3, 1, 1), nn.LeakyReLU(0.2))
        channels = [base_channels]
        self.down = nn.ModuleList()
        for level in range(n_downsamples):
            c_out = min(base_channels * 2 ** (level + 1), max_channels)
            block: list[nn.Module] = [conv(channels[-1], c_out, 4, 2, 1)]
            # innermost feature map may be a single voxel; no norm there
            if level < n_downsamples - 1:
                block.append(norm(c_out, affine=True))
            block.append(nn.LeakyReLU(0.2))
            self.down.append(nn.Sequential(*block))
            channels.append(c_out)

        self.up = nn.ModuleList()
        current = channels[-1]
        for level in reversed(range(n_downsamples)):
            c_out = channels[level]
            self.up.append(nn.Sequential(conv_t(current, c_out, 4, 2, 1), norm(c_out, affine=True), nn.ReLU()))
            current = c_out + (channels[level] if skip_connections else 0)
        self.head = conv(current, out_channels, 3, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _check_spatial(x, self.dims, 2**self.n_downsamples, type(self).__name__)
        features = [self.stem(x)]
        h = features[0]
        for block in self.down:
            h = block(h)
            features.append(h)
        for k, block in enumerate(self.up):
            h = block(h)
            if self.skip_connections:
                h = torch.cat([h, features[self.n_downsamples - 1 - k]], dim=1)
        out = self.head(h)
        return torch.sigmoid(out) if self.squash else out


class PatchDiscriminator(nn.Module):
    """Stack of stride-2 convolutions ending in a per-patch probability grid."""

    def __init__(self, spec: DiscriminatorSpec) -> None:
        super().__init__()
        conv, _, norm = _layers(spec.dims)
        self.dims = spec.dims
        self.n_strided_layers = spec.n_strided_layers
        self.conditional = spec.conditional

        c_in = spec.in_channels * (2 if spec.conditional else 1)
        layers: list[nn.Module] = [conv(c_in, spec.base_channels, 4, 2, 1), nn.LeakyReLU(0.2)]
        current = spec.base_channels
        for level in range(1, spec.n_strided_layers):
            c_out = min(spec.base_channels * 2**level, spec.max_channels)
            layers += [conv(current, c_out, 4, 2, 1), norm(c_out, affine=True), nn.LeakyReLU(0.2)]
            current = c_out
        layers.append(conv(current, 1, 3, 1, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
        _check_spatial(x, self.dims, 2**self.n_strided_layers, type(self).__name__)
        if self.conditional:
            if condition is None:
                raise ValueError("conditional discriminator requires a condition tensor")
            x = torch.cat([x, condition], dim=1)
        return torch.sigmoid(self.body(x))


def _seeded(seed: int, factory: Callable[[], nn.Module]) -> nn.Module:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_generator(spec: GeneratorSpec, seed: int = 0) -> UNet:
    model = _seeded(
        seed,
        lambda: UNet(
            dims=spec.dims,
            in_channels=spec.in_channels,
            out_channels=spec.out_channels,
            base_channels=spec.base_channels,
            n_downsamples=spec.n_downsamples,
            max_channels=spec.max_channels,
            skip_connections=spec.skip_connections,
            squash=True,
        ),
    )
    model.init_seed = seed  # type: ignore[attr-defined]
    return model  # type: ignore[return-value]


def build_discriminator(spec: DiscriminatorSpec, seed: int = 0) -> PatchDiscriminator:
    model = _seeded(seed, lambda: PatchDiscriminator(spec))
    model.init_seed = seed  # type: ignore[attr-defined]
    return model  # type: ignore[return-value]


def build_segmenter(spec: SegmenterSpec, seed: int = 0) -> UNet:
    model = _seeded(
        seed,
        lambda: UNet(
            dims=2,
            in_channels=1,
            out_channels=1,
            base_channels=spec.base_channels,
            n_downsamples=spec.n_downsamples,
            max_channels=spec.max_channels,
            skip_connections=True,
            squash=False,
        ),
    )
    model.init_seed = seed  # type: ignore[attr-defined]
    return model  # type: ignore[return-value]


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def freeze(model: nn.Module) -> nn.Module:
    """Switch to eval mode, stop gradients into every parameter and mark the module read-only."""
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    model.frozen = True  # type: ignore[attr-defined]
    return model


@dataclass(frozen=True)
class ProbeResult:
    max_relative_error: float
    n_checked: int
    worst_parameter: str


def gradient_probe(
    model: nn.Module,
    loss_fn: Callable[[], torch.Tensor],
    *,
    parameters: Iterable[tuple[str, nn.Parameter]] | None = None,
    max_params: int = 200,
    step: float = 1e-5,
    seed: int = 0,
    floor: float = 1e-6,
) -> ProbeResult:
    """
    Compare autograd gradients of ``loss_fn()`` with central finite differences.

    The model (and any tensor ``loss_fn`` closes over) must already be float64.
    Relative error per entry is ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    named = [(n, p) for n, p in (parameters if parameters is not None else model.named_parameters()) if p.requires_grad]
    if not named:
        raise ValueError("gradient_probe needs at least one trainable parameter")
    if any(p.dtype != torch.float64 for _, p in named):
        raise ValueError("gradient_probe requires float64 parameters; call model.double() first")

    loss = loss_fn()
    if not torch.isfinite(loss):
        raise NonFiniteLossError(f"probe loss is not finite: {loss.item()}")
    grads = torch.autograd.grad(loss, [p for _, p in named], allow_unused=True)
    analytic = [g if g is not None else torch.zeros_like(p) for g, (_, p) in zip(grads, named)]

    sizes = [p.numel() for _, p in named]
    offsets = [0]
    for size in sizes:
        offsets.append(offsets[-1] + size)
    total = offsets[-1]
    generator = torch.Generator().manual_seed(seed)
    picks = torch.randperm(total, generator=generator)[: min(max_params, total)].sort().values.tolist()

    worst, worst_name = 0.0, ""
    with torch.no_grad():
        for flat_index in picks:
            slot = next(i for i in range(len(named)) if offsets[i] <= flat_index < offsets[i + 1])
            name, param = named[slot]
            position = flat_index - offsets[slot]
            view = param.view(-1)
            original = view[position].item()

            view[position] = original + step
            plus = loss_fn().item()
            view[position] = original - step
            minus = loss_fn().item()
            view[position] = original

            numeric = (plus - minus) / (2.0 * step)
            exact = analytic[slot].reshape(-1)[position].item()
            if not (math.isfinite(plus) and math.isfinite(minus)):
                raise NonFiniteLossError(f"probe loss became non-finite while perturbing {name}")
            error = abs(exact - numeric) / max(abs(exact), abs(numeric), floor)
            if error > worst:
                worst, worst_name = error, f"{name}[{position}]"

    logger.debug(f"gradient probe checked {len(picks)} entries, worst {worst:.3e} at {worst_name}")
    return ProbeResult(max_relative_error=worst, n_checked=len(picks), worst_parameter=worst_name)
