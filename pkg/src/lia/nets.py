"""Encoder, flow generator, refinement ladder and discriminator at desk scale.

Every network works on 3 x R x R images in [-1, 1] (R = 64 by default) and on
the pyramid of scales 4, 8, ..., R. The encoder emits one appearance feature
map per scale plus a latent code from the coarsest map; the flow generator
turns a latent code into one (flow, mask) pair per scale; the refinement
ladder turns masked warped features back into RGB.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from . import lmd
from .core import Scaled, ShapeError, affine, conv2d, lrelu, resample2x
from .warp import masked_warp

FLOW_LIMIT = 2.0
DEMOD_EPS = 1e-8


@dataclass(frozen=True)
class NetConfig:
    resolution: int = 64
    latent_dim: int = 128
    num_directions: int = 20
    base_channels: int = 32
    max_channels: int = 256
    use_dictionary: bool = True

    @property
    def scales(self) -> list[int]:
        """Pyramid scales, coarse to fine."""
        n = int(round(math.log2(self.resolution)))
        if 2**n != self.resolution or n < 3:
            raise ValueError(f"resolution must be a power of two >= 8, got {self.resolution}")
        return [2**k for k in range(2, n + 1)]

    def channels(self, scale: int) -> int:
        return min(self.max_channels, self.base_channels * self.resolution // scale)


@dataclass
class EncoderOutput:
    latent: torch.Tensor
    features: list[torch.Tensor]  # coarse -> fine


@dataclass
class FlowPyramid:
    flows: list[torch.Tensor]  # each B x 2 x s x s
    masks: list[torch.Tensor]  # each B x 1 x s x s

    def __len__(self) -> int:
        return len(self.flows)


@dataclass
class RgbLadder:
    rungs: list[torch.Tensor]
    inpainted: list[torch.Tensor] = field(default_factory=list)
    carried: list[torch.Tensor] = field(default_factory=list)

    @property
    def image(self) -> torch.Tensor:
        return torch.tanh(self.rungs[-1])


def _param(shape, gen, gain=1.0) -> Scaled:
    return Scaled(shape, gen, gain)


def _check_image(x: torch.Tensor, resolution: int, who: str) -> torch.Tensor:
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != resolution or x.shape[3] != resolution:
        raise ShapeError(f"{who}: expected 3 x {resolution} x {resolution} image, got {tuple(x.shape)}")
    return x


def modulated_conv2d(
    x: torch.Tensor,
    weight: torch.Tensor,
    style: torch.Tensor,
    bias: torch.Tensor | None = None,
    demodulate: bool = True,
) -> torch.Tensor:
    """Per-sample style-scaled convolution with optional weight demodulation.

    Scaling the input channels by the style is the same as scaling the weight's
    input axis, so one shared convolution serves the whole batch; the
    demodulation factor is then applied per output channel.
    """
    if style.shape != (x.shape[0], weight.shape[1]):
        raise ShapeError(f"modulated_conv2d: style {tuple(style.shape)} vs input channels {weight.shape[1]}")
    k = weight.shape[-1]
    out = conv2d(x * style[:, :, None, None], weight, None, stride=1, pad=k // 2)
    if demodulate:
        energy = (style * style) @ (weight * weight).sum(dim=(2, 3)).t()
        out = out * torch.rsqrt(energy + DEMOD_EPS)[:, :, None, None]
    if bias is not None:
        out = out + bias[None, :, None, None]
    return out


class ResDown(nn.Module):
    def __init__(self, c_in: int, c_out: int, gen):
        super().__init__()
        self.w1 = _param((c_in, c_in, 3, 3), gen, math.sqrt(2))
        self.b1 = nn.Parameter(torch.zeros(c_in))
        self.w2 = _param((c_out, c_in, 3, 3), gen, math.sqrt(2))
        self.b2 = nn.Parameter(torch.zeros(c_out))
        self.skip = _param((c_out, c_in, 1, 1), gen)

    def forward(self, x):
        h = lrelu(conv2d(x, self.w1(), self.b1, pad=1))
        h = lrelu(conv2d(resample2x(h, "down"), self.w2(), self.b2, pad=1))
        s = conv2d(resample2x(x, "down"), self.skip())
        return (h + s) / math.sqrt(2)


class Encoder(nn.Module):
    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        scales = cfg.scales[::-1]  # fine -> coarse
        self.stem_w = _param((cfg.channels(scales[0]), 3, 3, 3), gen, math.sqrt(2))
        self.stem_b = nn.Parameter(torch.zeros(cfg.channels(scales[0])))
        self.blocks = nn.ModuleList(
            ResDown(cfg.channels(s), cfg.channels(s // 2), gen) for s in scales[:-1]
        )
        flat = cfg.channels(4) * 16
        self.head_w = _param((cfg.latent_dim, flat), gen)
        self.head_b = nn.Parameter(torch.zeros(cfg.latent_dim))

    def forward(self, x: torch.Tensor) -> EncoderOutput:
        x = _check_image(x, self.cfg.resolution, "encode")
        h = lrelu(conv2d(x, self.stem_w(), self.stem_b, pad=1))
        feats = [h]
        for block in self.blocks:
            h = block(h)
            feats.append(h)
        latent = affine(h.flatten(1), self.head_w(), self.head_b)
        return EncoderOutput(latent=latent, features=feats[::-1])


class StyleBlock(nn.Module):
    """Optional x2 upsample, then a style-modulated 3x3 conv and a flow/mask head."""

    def __init__(self, c_in: int, c_out: int, latent_dim: int, upsample: bool, gen):
        super().__init__()
        self.upsample = upsample
        self.style_w = _param((c_in, latent_dim), gen)
        self.style_b = nn.Parameter(torch.ones(c_in))
        self.weight = _param((c_out, c_in, 3, 3), gen)
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.flow_style_w = _param((c_out, latent_dim), gen)
        self.flow_style_b = nn.Parameter(torch.ones(c_out))
        # small flow head at init: warps start near identity, masks near open
        self.flow_w = _param((3, c_out, 3, 3), gen, 0.1)
        self.flow_b = nn.Parameter(torch.tensor([0.0, 0.0, 2.0]))

    def forward(self, h, z):
        if self.upsample:
            h = resample2x(h, "up")
        h = lrelu(modulated_conv2d(h, self.weight(), affine(z, self.style_w(), self.style_b), self.bias))
        out = modulated_conv2d(
            h, self.flow_w(), affine(z, self.flow_style_w(), self.flow_style_b), self.flow_b, demodulate=False
        )
        flow = FLOW_LIMIT * torch.tanh(out[:, :2])
        mask = torch.sigmoid(out[:, 2:3])
        return h, flow, mask


class FlowGenerator(nn.Module):
    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        scales = cfg.scales
        self.const = nn.Parameter(torch.randn(1, cfg.channels(4), 4, 4, generator=gen))
        blocks = []
        prev = cfg.channels(4)
        for i, s in enumerate(scales):
            blocks.append(StyleBlock(prev, cfg.channels(s), cfg.latent_dim, upsample=i > 0, gen=gen))
            prev = cfg.channels(s)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, z: torch.Tensor) -> FlowPyramid:
        if z.dim() == 1:
            z = z.unsqueeze(0)
        if z.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"generate_flow: latent dim {z.shape[-1]} != {self.cfg.latent_dim}")
        h = self.const.expand(z.shape[0], -1, -1, -1)
        flows, masks = [], []
        for block in self.blocks:
            h, flow, mask = block(h, z)
            flows.append(flow)
            masks.append(mask)
        return FlowPyramid(flows, masks)


class Refiner(nn.Module):
    """RGB ladder o_i = f(x'_i) + g(o_{i-1}); f is a 3x3 conv, g a 1x1 conv then x2 upsample."""

    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        self.inpaint_w = nn.ModuleList(_param((3, cfg.channels(s), 3, 3), gen) for s in cfg.scales)
        self.inpaint_b = nn.ParameterList(nn.Parameter(torch.zeros(3)) for _ in cfg.scales)
        self.carry_w = nn.ModuleList(_param((3, 3, 1, 1), gen) for _ in cfg.scales[1:])

    def inpaint(self, i: int, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.inpaint_w[i](), self.inpaint_b[i], pad=1)

    def carry(self, i: int, o_prev: torch.Tensor) -> torch.Tensor:
        # no bias: the carried term of a zero rung stays zero
        return resample2x(conv2d(o_prev, self.carry_w[i - 1]()), "up")

    def forward(self, warped: list[torch.Tensor]) -> RgbLadder:
        if len(warped) != len(self.cfg.scales):
            raise ShapeError(f"refine: {len(warped)} feature maps for {len(self.cfg.scales)} scales")
        ladder = RgbLadder(rungs=[])
        prev = None
        for i, (x, s) in enumerate(zip(warped, self.cfg.scales)):
            if x.shape[-1] != s or x.shape[1] != self.cfg.channels(s):
                raise ShapeError(f"refine: level {i} expected {self.cfg.channels(s)} x {s} x {s}, got {tuple(x.shape[1:])}")
            f = self.inpaint(i, x)
            g = torch.zeros_like(f) if prev is None else self.carry(i, prev)
            prev = f + g
            ladder.inpainted.append(f)
            ladder.carried.append(g)
            ladder.rungs.append(prev)
        return ladder


class Discriminator(nn.Module):
    """Four stride-2 4x4 conv blocks, then one logit per image."""

    def __init__(self, cfg: NetConfig, gen=None):
        super().__init__()
        self.cfg = cfg
        widths = [3] + [min(cfg.max_channels, cfg.base_channels * 2**i) for i in range(4)]
        self.ws = nn.ModuleList(_param((o, i, 4, 4), gen, math.sqrt(2)) for i, o in zip(widths[:-1], widths[1:]))
        self.bs = nn.ParameterList(nn.Parameter(torch.zeros(o)) for o in widths[1:])
        side = cfg.resolution // 16
        self.out_w = _param((1, widths[-1] * side * side), gen)
        self.out_b = nn.Parameter(torch.zeros(1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = _check_image(x, self.cfg.resolution, "discriminate")
        for w, b in zip(self.ws, self.bs):
            h = lrelu(conv2d(h, w(), b, stride=2, pad=1))
        return affine(h.flatten(1), self.out_w(), self.out_b).squeeze(1)


@dataclass
class Decoded:
    image: torch.Tensor
    flows: FlowPyramid
    ladder: RgbLadder


class Animator(nn.Module):
    """Encoder + latent motion + flow generator + refinement ladder."""

    def __init__(self, cfg: NetConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        self.encoder = Encoder(cfg, gen)
        if cfg.use_dictionary:
            self.motion = lmd.LinearMotion(cfg.latent_dim, cfg.num_directions, gen)
        else:
            self.motion = lmd.DirectPath(cfg.latent_dim, gen)
        self.flow_generator = FlowGenerator(cfg, gen)
        self.refiner = Refiner(cfg, gen)

    def encode(self, x: torch.Tensor) -> EncoderOutput:
        return self.encoder(x)

    def path(self, z_driving: torch.Tensor) -> torch.Tensor:
        """Latent path w_{r->d} from a driving code z_{d->r}."""
        squeeze = z_driving.dim() == 1
        w = self.motion(z_driving.unsqueeze(0) if squeeze else z_driving)
        return w.squeeze(0) if squeeze else w

    def directions(self) -> torch.Tensor:
        if not self.cfg.use_dictionary:
            raise ValueError("model was built without a motion dictionary")
        return self.motion.dictionary()

    def decode(self, z_target: torch.Tensor, features: list[torch.Tensor]) -> Decoded:
        flows = self.flow_generator(z_target)
        b = flows.flows[0].shape[0]
        warped = []
        for feat, flow, mask in zip(features, flows.flows, flows.masks):
            if feat.shape[0] != b:
                feat = feat.expand(b, -1, -1, -1)
            warped.append(masked_warp(feat, flow, mask, check=False))
        ladder = self.refiner(warped)
        return Decoded(ladder.image, flows, ladder)

    def forward(self, source: torch.Tensor, driving: torch.Tensor) -> Decoded:
        source = _check_image(source, self.cfg.resolution, "source")
        driving = _check_image(driving, self.cfg.resolution, "driving")
        b = source.shape[0]
        enc = self.encode(torch.cat([source, driving]))
        z_sr, z_dr = enc.latent[:b], enc.latent[b:]
        z_sd = lmd.navigate(z_sr, self.path(z_dr))
        return self.decode(z_sd, [f[:b] for f in enc.features])
