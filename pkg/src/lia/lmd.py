"""Linear motion decomposition: an orthonormal motion dictionary and the latent
path algebra built on it.

A latent path is a magnitude-weighted sum of dictionary rows. Animating means
walking the source code along such a path; the transfer helpers below build the
per-frame target codes used at inference time.
"""
from __future__ import annotations

import torch
from torch import nn

from .core import Scaled, ShapeError, affine, lrelu

PIVOT_EPS = 1e-8


class DegenerateDictionaryError(ValueError):
    def __init__(self, row: int, norm: float):
        super().__init__(f"orthonormalize: row {row} is (nearly) dependent on earlier rows (pivot norm {norm:.3e})")
        self.row = row
        self.norm = norm


def orthonormalize(raw: torch.Tensor) -> torch.Tensor:
    """Modified Gram-Schmidt over the rows of ``raw`` (shape ... x M x N, M <= N).

    Differentiable: the projection formula is built from ordinary tensor ops,
    so gradients reach the raw matrix. Leading batch dimensions are allowed.
    """
    if raw.dim() < 2:
        raise ShapeError(f"orthonormalize: expected M x N matrix, got shape {tuple(raw.shape)}")
    m, n = raw.shape[-2:]
    if m > n:
        raise ShapeError(f"orthonormalize: M={m} rows cannot be orthonormal in N={n} dimensions")
    basis: list[torch.Tensor] = []
    for i in range(m):
        v = raw[..., i, :]
        for q in basis:
            v = v - (v * q).sum(-1, keepdim=True) * q
        norm = v.norm(dim=-1, keepdim=True)
        smallest = norm.min().item()
        if not smallest >= PIVOT_EPS:
            raise DegenerateDictionaryError(i, smallest)
        basis.append(v / norm)
    return torch.stack(basis, dim=-2)


def compose_path(magnitudes: torch.Tensor, directions: torch.Tensor) -> torch.Tensor:
    """w = sum_i a_i d_i. ``magnitudes`` is M or B x M, ``directions`` M x N."""
    if directions.dim() != 2:
        raise ShapeError(f"compose_path: directions must be M x N, got {tuple(directions.shape)}")
    if magnitudes.shape[-1] != directions.shape[0]:
        raise ShapeError(
            f"compose_path: {magnitudes.shape[-1]} magnitudes for {directions.shape[0]} directions"
        )
    return magnitudes @ directions


def _same_dim(a: torch.Tensor, b: torch.Tensor, what: str) -> None:
    if a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"{what}: latent dimension {a.shape[-1]} != {b.shape[-1]}")


def navigate(z_start: torch.Tensor, path: torch.Tensor) -> torch.Tensor:
    _same_dim(z_start, path, "navigate")
    return z_start + path


def absolute_transfer(z_sr: torch.Tensor, w_rt: torch.Tensor) -> torch.Tensor:
    """Per-frame target code when the source is the driving video's own first frame."""
    return navigate(z_sr, w_rt)


def relative_transfer(
    z_sr: torch.Tensor, w_rs: torch.Tensor, w_rt: torch.Tensor, w_r1: torch.Tensor
) -> torch.Tensor:
    """(z_sr + w_rs) + (w_rt - w_r1): keep the source pose, add the driving motion.

    Accumulated in float64 and rounded once. Where ``w_r1 == w_rs`` the
    cancelling pair is grouped first instead, so that case equals the absolute
    transfer bit for bit; the first-frame case (``w_rt == w_r1``) is already
    exact because float64 rounding of a float32 sum is innocuous.
    """
    for other in (w_rs, w_rt, w_r1):
        _same_dim(z_sr, other, "relative_transfer")
    wide = [t.to(torch.float64) for t in (z_sr, w_rs, w_rt, w_r1)]
    general = ((wide[0] + wide[1]) + (wide[2] - wide[3])).to(z_sr.dtype)
    same_start = (z_sr + w_rt) + (w_rs - w_r1)
    return torch.where(w_rs == w_r1, same_start, general)


class MotionDictionary(nn.Module):
    """Learnable M x N matrix, orthonormalized on every call.

    The raw matrix is Gaussian with std 1/sqrt(N), stored like every other
    weight as a unit-scale parameter times a constant gain.
    """

    def __init__(self, num_directions: int, latent_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        if num_directions > latent_dim:
            raise ShapeError(f"MotionDictionary: M={num_directions} exceeds N={latent_dim}")
        self.store = Scaled((num_directions, latent_dim), generator)

    @property
    def raw(self) -> torch.Tensor:
        return self.store()

    def forward(self) -> torch.Tensor:
        return orthonormalize(self.raw)


class MLP(nn.Module):
    """Stack of affine layers, leaky activation between all but the last."""

    def __init__(self, widths: list[int], generator: torch.Generator | None = None):
        super().__init__()
        self.weights = nn.ModuleList()
        self.biases = nn.ParameterList()
        for f_in, f_out in zip(widths[:-1], widths[1:]):
            self.weights.append(Scaled((f_out, f_in), generator))
            self.biases.append(nn.Parameter(torch.zeros(f_out)))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = affine(x, w(), b)
            if i < last:
                x = lrelu(x)
        return x


class MagnitudeHead(MLP):
    """5-layer perceptron from a driving latent code to M direction magnitudes."""

    def __init__(self, latent_dim: int, num_directions: int, generator: torch.Generator | None = None):
        super().__init__([latent_dim] * 5 + [num_directions], generator)


def magnitude_head(z_driving: torch.Tensor, head: MagnitudeHead) -> torch.Tensor:
    squeeze = z_driving.dim() == 1
    x = z_driving.unsqueeze(0) if squeeze else z_driving
    a = head(x)
    return a.squeeze(0) if squeeze else a


class LinearMotion(nn.Module):
    """Driving code -> latent path through magnitudes over the motion dictionary."""

    def __init__(self, latent_dim: int, num_directions: int, generator: torch.Generator | None = None):
        super().__init__()
        self.head = MagnitudeHead(latent_dim, num_directions, generator)
        self.dictionary = MotionDictionary(num_directions, latent_dim, generator)

    def magnitudes(self, z_driving: torch.Tensor) -> torch.Tensor:
        return magnitude_head(z_driving, self.head)

    def forward(self, z_driving: torch.Tensor) -> torch.Tensor:
        return compose_path(self.magnitudes(z_driving), self.dictionary())


class DirectPath(nn.Module):
    """Ablation: the perceptron emits the latent path itself, no dictionary."""

    def __init__(self, latent_dim: int, generator: torch.Generator | None = None):
        super().__init__()
        self.head = MLP([latent_dim] * 6, generator)

    def forward(self, z_driving: torch.Tensor) -> torch.Tensor:
        return self.head(z_driving)
