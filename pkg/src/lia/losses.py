"""Training objectives: pixel L1, multi-resolution feature loss, non-saturating GAN terms."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .core import ShapeError, conv2d, lrelu, resample2x

DEFAULT_LAMBDA = 10.0
PYRAMID_LEVELS = 4


@dataclass
class LossBreakdown:
    recon: torch.Tensor
    perceptual: torch.Tensor
    adversarial: torch.Tensor
    total: torch.Tensor
    lam: float


def _same_shape(a: torch.Tensor, b: torch.Tensor, who: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{who}: shapes differ, {tuple(a.shape)} vs {tuple(b.shape)}")


def recon_loss(generated: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    _same_shape(generated, target, "recon_loss")
    return (generated - target).abs().mean()


class FeatureExtractor(nn.Module):
    """Frozen, randomly initialised 4-stage conv net standing in for VGG19.

    Weights are drawn once from ``seed`` and never receive gradients.
    """

    widths = (16, 32, 64, 64)

    def __init__(self, seed: int = 1234):
        super().__init__()
        self.seed = seed
        gen = torch.Generator().manual_seed(seed)
        chans = (3,) + self.widths
        for i, (c_in, c_out) in enumerate(zip(chans[:-1], chans[1:])):
            k = 3 if i == 0 else 4
            w = torch.randn(c_out, c_in, k, k, generator=gen) * math.sqrt(2.0 / (c_in * k * k))
            self.register_buffer(f"w{i}", w)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        h = lrelu(conv2d(x, self.w0, None, stride=1, pad=1))
        feats.append(h)
        for i in range(1, len(self.widths)):
            h = lrelu(conv2d(h, getattr(self, f"w{i}"), None, stride=2, pad=1))
            feats.append(h)
        return feats


def image_pyramid(x: torch.Tensor, levels: int = PYRAMID_LEVELS) -> list[torch.Tensor]:
    out = [x]
    for _ in range(levels - 1):
        out.append(resample2x(out[-1], "down"))
    return out


def perceptual_loss(generated: torch.Tensor, target: torch.Tensor, extractor: FeatureExtractor) -> torch.Tensor:
    """Sum over pyramid levels and extractor stages of mean |F(target) - F(generated)|."""
    _same_shape(generated, target, "perceptual_loss")
    total = generated.new_zeros(())
    for g, t in zip(image_pyramid(generated), image_pyramid(target)):
        for fg, ft in zip(extractor(g), extractor(t)):
            total = total + (ft - fg).abs().mean()
    return total


def adversarial_g_loss(fake_logit: torch.Tensor) -> torch.Tensor:
    """mean -log sigmoid(logit), written as softplus(-logit)."""
    return F.softplus(-fake_logit).mean()


def discriminator_loss(real_logit: torch.Tensor, fake_logit: torch.Tensor) -> torch.Tensor:
    return F.softplus(-real_logit).mean() + F.softplus(fake_logit).mean()


def total_loss(recon, perceptual, adversarial, lam: float = DEFAULT_LAMBDA) -> LossBreakdown:
    if not lam > 0:
        raise ValueError(f"total_loss: lambda must be positive, got {lam}")
    total = recon + lam * perceptual + adversarial
    return LossBreakdown(recon, perceptual, adversarial, total, lam)
