"""Backward bilinear warping along dense flow fields.

Flow is a 2 x H x W field of offsets in normalized coordinates, where -1..1
spans the pixel centres of the first and last column (row). Channel 0 moves the
sample along x, channel 1 along y. Samples falling outside the image clamp to
the border.
"""
from __future__ import annotations

import torch

from .core import ShapeError


def identity_grid(h: int, w: int, dtype=torch.float32) -> torch.Tensor:
    """2 x H x W normalized coordinates of each pixel centre."""
    ys = torch.linspace(-1.0, 1.0, h, dtype=dtype) if h > 1 else torch.zeros(1, dtype=dtype)
    xs = torch.linspace(-1.0, 1.0, w, dtype=dtype) if w > 1 else torch.zeros(1, dtype=dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx, gy])


def pixel_shift(pixels: float, extent: int) -> float:
    """Normalized offset that moves a sample by ``pixels`` along an axis of ``extent``."""
    return 2.0 * pixels / (extent - 1)


def bilinear_warp(features: torch.Tensor, flow: torch.Tensor) -> torch.Tensor:
    squeeze = features.dim() == 3
    x = features.unsqueeze(0) if squeeze else features
    f = flow.unsqueeze(0) if flow.dim() == 3 else flow
    if x.dim() != 4 or f.dim() != 4 or f.shape[1] != 2:
        raise ShapeError(f"bilinear_warp: features {tuple(features.shape)}, flow {tuple(flow.shape)}")
    b, c, h, w = x.shape
    if f.shape[2:] != x.shape[2:]:
        raise ShapeError(f"bilinear_warp: flow extent {tuple(f.shape[2:])} != feature extent {(h, w)}")
    if f.shape[0] != b:
        if f.shape[0] != 1:
            raise ShapeError(f"bilinear_warp: flow batch {f.shape[0]} != feature batch {b}")
        f = f.expand(b, -1, -1, -1)

    cols = torch.arange(w, dtype=x.dtype).view(1, 1, w)
    rows = torch.arange(h, dtype=x.dtype).view(1, h, 1)
    px = (cols + f[:, 0] * ((w - 1) / 2.0)).clamp(0, w - 1)
    py = (rows + f[:, 1] * ((h - 1) / 2.0)).clamp(0, h - 1)

    x0 = px.detach().floor().clamp(max=max(w - 2, 0))
    y0 = py.detach().floor().clamp(max=max(h - 2, 0))
    wx = (px - x0).unsqueeze(1)
    wy = (py - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=w - 1)
    y1 = (y0 + 1).clamp(max=h - 1)

    flat = x.reshape(b, c, h * w)

    def tap(yi: torch.Tensor, xi: torch.Tensor) -> torch.Tensor:
        idx = (yi * w + xi).view(b, 1, h * w).expand(b, c, h * w)
        return flat.gather(2, idx).view(b, c, h, w)

    top = tap(y0, x0) * (1 - wx) + tap(y0, x1) * wx
    bottom = tap(y1, x0) * (1 - wx) + tap(y1, x1) * wx
    out = top * (1 - wy) + bottom * wy
    return out.squeeze(0) if squeeze else out


def masked_warp(features: torch.Tensor, flow: torch.Tensor, mask: torch.Tensor, check: bool = True) -> torch.Tensor:
    """Warp, then gate every channel by a single-channel mask in [0, 1]."""
    m = mask.unsqueeze(0) if mask.dim() == 3 else mask
    if m.dim() != 4 or m.shape[1] != 1:
        raise ShapeError(f"masked_warp: mask must be 1 x H x W, got {tuple(mask.shape)}")
    if check and (m.min().item() < 0.0 or m.max().item() > 1.0):
        raise ValueError(f"masked_warp: mask values must lie in [0, 1], got [{m.min().item()}, {m.max().item()}]")
    warped = bilinear_warp(features, flow)
    if warped.dim() == 3:
        m = m.squeeze(0)
    return warped * m
