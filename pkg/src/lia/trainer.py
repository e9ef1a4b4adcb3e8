"""Self-supervised training loop, Adam, and the binary checkpoint format.

Checkpoint layout (all integers little-endian)::

    b"LIA\\x01" | u32 version | u32 n | n bytes of JSON (config, step, rng state)
    u32 count | count x (u32 name_len, name utf-8, u8 dtype, u32 rank, rank x u32 dims, float32 data)
"""
from __future__ import annotations

import dataclasses
import io
import json
import logging
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
import torch

from . import data as data_mod
from .core import backprop
from .losses import (
    DEFAULT_LAMBDA,
    FeatureExtractor,
    LossBreakdown,
    adversarial_g_loss,
    discriminator_loss,
    perceptual_loss,
    recon_loss,
    total_loss,
)
from .nets import Animator, Discriminator, NetConfig

log = logging.getLogger(__name__)

MAGIC = b"LIA\x01"
FORMAT_VERSION = 1
DTYPE_F32 = 1


class CheckpointError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    latent_dim: int = 128
    dict_size: int = 20
    lam: float = DEFAULT_LAMBDA
    lr: float = 0.002
    batch_size: int = 8
    steps: int = 2000
    seed: int = 0
    resolution: int = 64
    base_channels: int = 16
    use_dictionary: bool = True
    clip_norm: float = 10.0  # <= 0 disables clipping
    extractor_seed: int = 1234
    data: str = "synthetic"  # "synthetic" or a frame-folder path
    num_seqs: int = 16
    seq_len: int = 32
    data_seed: int = 0

    def __post_init__(self):
        for name in ("latent_dim", "dict_size", "lam", "batch_size", "resolution", "base_channels", "num_seqs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"TrainConfig.{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.steps < 0:
            raise ValueError("TrainConfig: lr and steps must be non-negative")

    def net_config(self) -> NetConfig:
        return NetConfig(
            resolution=self.resolution,
            latent_dim=self.latent_dim,
            num_directions=self.dict_size,
            base_channels=self.base_channels,
            max_channels=self.base_channels * 8,
            use_dictionary=self.use_dictionary,
        )


@dataclass
class Moments:
    m: torch.Tensor
    v: torch.Tensor


def adam_step(
    params: dict[str, torch.Tensor],
    grads: dict[str, torch.Tensor],
    moments: dict[str, Moments],
    lr: float,
    t: int,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, torch.Tensor], dict[str, Moments]]:
    """Bias-corrected Adam update, applied in place. ``t`` counts from 1.

    Every gradient is checked before anything is touched, so a non-finite
    gradient leaves parameters and moments exactly as they were.
    """
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: gradient shape {tuple(g.shape)} != parameter {name} {tuple(p.shape)}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"adam_step: non-finite gradient for parameter {name}")
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            mo = moments.setdefault(name, Moments(torch.zeros_like(p), torch.zeros_like(p)))
            mo.m.mul_(beta1).add_(g, alpha=1.0 - beta1)
            mo.v.mul_(beta2).addcmul_(g, g, value=1.0 - beta2)
            denom = (mo.v / c2).sqrt_().add_(eps)
            p.addcdiv_(mo.m, denom, value=-lr / c1)
    return params, moments


def clip_global_norm(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g.mul_(scale)
    return total


@dataclass
class StepResult:
    losses: LossBreakdown
    d_loss: float

    def floats(self) -> dict[str, float]:
        return {
            "recon": float(self.losses.recon),
            "vgg": float(self.losses.perceptual),
            "adv": float(self.losses.adversarial),
            "total": float(self.losses.total),
            "d": self.d_loss,
        }


@dataclass
class TrainState:
    config: TrainConfig
    model: Animator
    disc: Discriminator
    extractor: FeatureExtractor
    moments_g: dict[str, Moments] = field(default_factory=dict)
    moments_d: dict[str, Moments] = field(default_factory=dict)
    step: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def fresh(cls, config: TrainConfig) -> "TrainState":
        net = config.net_config()
        return cls(
            config=config,
            model=Animator(net, seed=config.seed),
            disc=Discriminator(net, torch.Generator().manual_seed(config.seed + 1)),
            extractor=FeatureExtractor(config.extractor_seed),
            rng=np.random.default_rng(config.seed),
        )


def batch_tensors(batch: list[data_mod.FramePair]) -> tuple[torch.Tensor, torch.Tensor]:
    xs = torch.from_numpy(np.stack([p.source for p in batch])).float()
    xd = torch.from_numpy(np.stack([p.driving for p in batch])).float()
    return xs, xd


def train_step(batch: list[data_mod.FramePair], state: TrainState) -> StepResult:
    """One discriminator update on detached fakes, then one generator update.

    Both phases share the same generator forward pass (and therefore the same
    freshly orthonormalized dictionary).
    """
    cfg = state.config
    xs, xd = batch_tensors(batch)
    fake = state.model(xs, xd).image
    t = state.step + 1

    d_params = dict(state.disc.named_parameters())
    d_loss = discriminator_loss(state.disc(xd), state.disc(fake.detach()))
    if not torch.isfinite(d_loss):
        raise NonFiniteError(f"discriminator loss is {d_loss.item()} at step {t}")
    d_grads = dict(zip(d_params, backprop(d_loss, list(d_params.values()))))
    clip_global_norm(d_grads, cfg.clip_norm)
    adam_step(d_params, d_grads, state.moments_d, cfg.lr, t)

    g_params = dict(state.model.named_parameters())
    parts = total_loss(
        recon_loss(fake, xd),
        perceptual_loss(fake, xd, state.extractor),
        adversarial_g_loss(state.disc(fake)),
        cfg.lam,
    )
    if not torch.isfinite(parts.total):
        raise NonFiniteError(f"generator loss is {parts.total.item()} at step {t}")
    g_grads = dict(zip(g_params, backprop(parts.total, list(g_params.values()))))
    clip_global_norm(g_grads, cfg.clip_norm)
    adam_step(g_params, g_grads, state.moments_g, cfg.lr, t)

    state.step = t
    detached = LossBreakdown(*(x.detach() for x in (parts.recon, parts.perceptual, parts.adversarial, parts.total)), parts.lam)
    return StepResult(detached, d_loss.item())


def load_dataset(config: TrainConfig) -> list[data_mod.VideoSequence]:
    if config.data == "synthetic":
        return data_mod.synth_dataset(config.num_seqs, seed=config.data_seed, length=config.seq_len,
                                      params=data_mod.SynthParams(resolution=config.resolution))
    return data_mod.load_frame_folder(config.data, config.resolution)


def metrics_line(step: int, r: StepResult) -> str:
    f = r.floats()
    return f"step={step} recon={f['recon']:.6f} vgg={f['vgg']:.6f} adv={f['adv']:.6f} d={f['d']:.6f}"


def parse_metrics(path: str | Path) -> list[dict[str, float]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append({k: float(v) for k, v in (tok.split("=", 1) for tok in line.split())})
    return rows


def train(
    state: TrainState,
    steps: int | None = None,
    dataset: list[data_mod.VideoSequence] | None = None,
    checkpoint: str | Path | None = None,
    metrics: str | Path | None = None,
    checkpoint_every: int = 500,
    on_step: Callable[[TrainState, StepResult], None] | None = None,
) -> list[StepResult]:
    """Run until ``state.step`` reaches ``steps`` (default: the configured total)."""
    cfg = state.config
    target = cfg.steps if steps is None else steps
    dataset = load_dataset(cfg) if dataset is None else dataset
    history = []
    log_file = open(metrics, "a") if metrics is not None else None
    try:
        while state.step < target:
            batch = [data_mod.sample_pair(dataset, state.rng) for _ in range(cfg.batch_size)]
            result = train_step(batch, state)
            history.append(result)
            if log_file is not None:
                log_file.write(metrics_line(state.step, result) + "\n")
                log_file.flush()
            if on_step is not None:
                on_step(state, result)
            if checkpoint is not None and checkpoint_every > 0 and state.step % checkpoint_every == 0:
                save_checkpoint(state, checkpoint)
    finally:
        if log_file is not None:
            log_file.close()
    if checkpoint is not None:
        save_checkpoint(state, checkpoint)
    return history


# -- checkpoint ---------------------------------------------------------------


def _tensor_table(state: TrainState) -> list[tuple[str, torch.Tensor]]:
    table = [(f"G.{k}", v) for k, v in state.model.state_dict().items()]
    table += [(f"D.{k}", v) for k, v in state.disc.state_dict().items()]
    table += [(f"extractor.{k}", v) for k, v in state.extractor.state_dict().items()]
    for prefix, moments in (("adam.G", state.moments_g), ("adam.D", state.moments_d)):
        for name, mo in moments.items():
            table.append((f"{prefix}.{name}.m", mo.m))
            table.append((f"{prefix}.{name}.v", mo.v))
    return table


def _rng_state_json(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def checkpoint_bytes(state: TrainState) -> bytes:
    header = {
        "config": dataclasses.asdict(state.config),
        "step": state.step,
        "rng": _rng_state_json(state.rng),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
    out.write(blob)
    table = _tensor_table(state)
    out.write(struct.pack("<I", len(table)))
    for name, tensor in table:
        raw = name.encode("utf-8")
        arr = tensor.detach().to(torch.float32).contiguous().numpy()
        out.write(struct.pack("<I", len(raw)))
        out.write(raw)
        out.write(struct.pack("<BI", DTYPE_F32, arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.astype("<f4").tobytes())
    return out.getvalue()


def save_checkpoint(state: TrainState, path: str | Path) -> Path:
    """Atomic write: temp file in the target directory, then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(state))
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"{self.path}: truncated checkpoint (wanted {n} bytes at offset {self.pos})")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its JSON header and an ordered tensor table."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a LIA checkpoint")
    version, n = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt config block: {exc}") from exc
    (count,) = r.unpack("<I")
    table = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        dtype, rank = r.unpack("<BI")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype code {dtype}")
        dims = r.unpack(f"<{rank}I") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        table[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).copy()
    if r.pos != len(r.buf):
        raise CheckpointError(f"{path}: {len(r.buf) - r.pos} trailing bytes after tensor table")
    return header, table


def _load_module(module: torch.nn.Module, table: dict[str, np.ndarray], prefix: str, path) -> None:
    expected = module.state_dict()
    loaded = {}
    for key, ref in expected.items():
        name = f"{prefix}.{key}"
        if name not in table:
            raise CheckpointError(f"{path}: missing tensor {name}")
        arr = table[name]
        if tuple(arr.shape) != tuple(ref.shape):
            raise CheckpointError(f"{path}: tensor {name} has shape {arr.shape}, model expects {tuple(ref.shape)}")
        loaded[key] = torch.from_numpy(arr)
    module.load_state_dict(loaded)


def _load_moments(table: dict[str, np.ndarray], prefix: str) -> dict[str, Moments]:
    moments = {}
    for name in table:
        if name.startswith(prefix + ".") and name.endswith(".m"):
            key = name[len(prefix) + 1:-2]
            moments[key] = Moments(torch.from_numpy(table[name]), torch.from_numpy(table[f"{prefix}.{key}.v"]))
    return moments


def load_checkpoint(path: str | Path) -> TrainState:
    header, table = read_checkpoint(path)
    try:
        config = TrainConfig(**header["config"])
    except TypeError as exc:
        raise CheckpointError(f"{path}: config block does not match TrainConfig: {exc}") from exc
    state = TrainState.fresh(config)
    _load_module(state.model, table, "G", path)
    _load_module(state.disc, table, "D", path)
    _load_module(state.extractor, table, "extractor", path)
    state.moments_g = _load_moments(table, "adam.G")
    state.moments_d = _load_moments(table, "adam.D")
    state.step = int(header["step"])
    state.rng.bit_generator.state = header["rng"]
    return state


def running_mean(values: Iterable[float], end: int, window: int) -> float:
    """Mean of values[end - window:end] (steps are 1-based, so ``end`` is a step number)."""
    vals = list(values)[max(0, end - window):end]
    return float(np.mean(vals))
