"""Differentiable dense-tensor primitives shared by every network in the package.

Tensors are ``torch.Tensor`` values in float32; the autograd tape plays the role
of the computation graph. Each op validates shapes up front so a mismatch is
reported with the offending dimension instead of surfacing deep inside torch.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

DTYPE = torch.float32
LEAKY_SLOPE = 0.2


class ShapeError(ValueError):
    """Raised when operands disagree on an extent."""


def _batched(x: torch.Tensor, rank: int, name: str) -> tuple[torch.Tensor, bool]:
    if x.dim() == rank - 1:
        return x.unsqueeze(0), True
    if x.dim() != rank:
        raise ShapeError(f"{name}: expected rank {rank - 1} or {rank}, got shape {tuple(x.shape)}")
    return x, False


def conv2d(
    input: torch.Tensor,
    weight: torch.Tensor,
    bias: torch.Tensor | None = None,
    stride: int = 1,
    pad: int = 0,
) -> torch.Tensor:
    """Zero-padded 2-D cross-correlation.

    ``input`` is C_in x H x W (or batched B x C_in x H x W), ``weight`` is
    C_out x C_in x k x k. The output extent must come out integral.
    """
    x, squeeze = _batched(input, 4, "conv2d input")
    if weight.dim() != 4:
        raise ShapeError(f"conv2d weight: expected rank 4, got shape {tuple(weight.shape)}")
    c_out, c_in, kh, kw = weight.shape
    if kh != kw:
        raise ShapeError(f"conv2d weight: kernel must be square, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d: input channels {x.shape[1]} != weight C_in {c_in}")
    if bias is not None and tuple(bias.shape) != (c_out,):
        raise ShapeError(f"conv2d: bias length {tuple(bias.shape)} != C_out {c_out}")
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: stride must be >= 1 and pad >= 0, got stride={stride} pad={pad}")
    for axis, extent in (("H", x.shape[2]), ("W", x.shape[3])):
        span = extent + 2 * pad - kh
        if span < 0 or span % stride:
            raise ShapeError(
                f"conv2d: output extent along {axis} is not integral "
                f"(({extent} + 2*{pad} - {kh}) / {stride})"
            )
    out = F.conv2d(x, weight, bias, stride=stride, padding=pad)
    return out.squeeze(0) if squeeze else out


def affine(input: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor | None = None) -> torch.Tensor:
    """``input @ weight.T + bias`` for a B x F_in input."""
    if input.dim() != 2:
        raise ShapeError(f"affine input: expected B x F_in, got shape {tuple(input.shape)}")
    if weight.dim() != 2 or weight.shape[1] != input.shape[1]:
        raise ShapeError(
            f"affine: input F_in {input.shape[1]} does not match weight shape {tuple(weight.shape)}"
        )
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ShapeError(f"affine: bias length {tuple(bias.shape)} != F_out {weight.shape[0]}")
    return F.linear(input, weight, bias)


def resample2x(input: torch.Tensor, mode: str) -> torch.Tensor:
    """Nearest-neighbour upsampling (``"up"``) or 2x2 mean pooling (``"down"``)."""
    x, squeeze = _batched(input, 4, "resample2x input")
    if mode == "up":
        out = x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3)
    elif mode == "down":
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ShapeError(f"resample2x down: extents must be even, got H={h} W={w}")
        out = F.avg_pool2d(x, 2)
    else:
        raise ValueError(f"resample2x: mode must be 'up' or 'down', got {mode!r}")
    return out.squeeze(0) if squeeze else out


def lrelu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


def backprop(loss: torch.Tensor, leaves: Sequence[torch.Tensor], retain_graph: bool = False) -> list[torch.Tensor]:
    """Reverse-mode gradients of a scalar ``loss`` with respect to ``leaves``.

    Leaves that do not feed the loss get an all-zero gradient rather than None.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backprop: loss must be scalar, got shape {tuple(loss.shape)}")
    leaves = list(leaves)
    if not loss.requires_grad:
        return [torch.zeros_like(leaf) for leaf in leaves]
    grads = torch.autograd.grad(loss.reshape(()), leaves, retain_graph=retain_graph, allow_unused=True)
    return [torch.zeros_like(leaf) if g is None else g for leaf, g in zip(leaves, grads)]


def finite_diff_check(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-3,
    *,
    op64: Callable[..., torch.Tensor] | None = None,
    wrt: Sequence[int] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Compare autograd against central differences of ``op(*inputs).sum()``.

    The analytic gradient is taken in float32; the numeric one is evaluated in
    float64 (through ``op64`` when the op closes over float32 parameters).
    Returns ``max |analytic - numeric| / max(1, |numeric|)``, or ``inf`` when
    anything non-finite shows up.

    ``wrt`` restricts the check to some inputs; ``max_entries`` probes a random
    subset of entries per input, for ops too costly to perturb exhaustively.
    """
    if step <= 0:
        raise ValueError("finite_diff_check: step must be positive")
    op64 = op if op64 is None else op64
    wrt = list(range(len(inputs))) if wrt is None else list(wrt)

    leaves = [t.detach().to(DTYPE).clone().requires_grad_(i in wrt) for i, t in enumerate(inputs)]
    value = op(*leaves).sum()
    if not torch.isfinite(value):
        return float("inf")
    analytic = backprop(value, [leaves[i] for i in wrt])

    base64 = [t.detach().to(torch.float64).clone() for t in inputs]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for slot, grad in zip(wrt, analytic):
            flat = base64[slot].view(-1)
            idx = np.arange(flat.numel())
            if max_entries is not None and flat.numel() > max_entries:
                idx = rng.choice(flat.numel(), size=max_entries, replace=False)
            g = grad.reshape(-1).to(torch.float64)
            for j in idx:
                orig = flat[j].item()
                flat[j] = orig + step
                plus = op64(*base64).sum().item()
                flat[j] = orig - step
                minus = op64(*base64).sum().item()
                flat[j] = orig
                numeric = (plus - minus) / (2.0 * step)
                a = g[j].item()
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    return float("inf")
                worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst


class Scaled(torch.nn.Module):
    """Weight stored as N(0, 1) and multiplied by ``gain / sqrt(fan_in)`` on use.

    Keeps every parameter at unit scale so a fixed Adam step size means the same
    relative change in every layer (equalized learning rate).
    """

    def __init__(self, shape: Sequence[int], generator: torch.Generator | None = None, gain: float = 1.0):
        super().__init__()
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
        self.weight = torch.nn.Parameter(torch.randn(*shape, generator=generator))
        self.scale = gain / float(np.sqrt(fan_in))

    def forward(self) -> torch.Tensor:
        return self.weight * self.scale
