"""Command line: ``lia <train|animate|sweep|reference|eval> [--flags]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import data as data_mod
from . import lmd
from .nets import Animator
from .trainer import CheckpointError, TrainConfig, TrainState, load_checkpoint, train
from .warp import bilinear_warp

log = logging.getLogger("lia")

PSNR_CAP = 99.0
POSE_WARN_THRESHOLD = 0.5


class CliError(RuntimeError):
    pass


def _tensor(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).float().unsqueeze(0)


def _numpy(image: torch.Tensor) -> np.ndarray:
    return image.detach().squeeze(0).numpy()


def load_model(checkpoint: str | Path) -> Animator:
    state = load_checkpoint(checkpoint)
    state.model.eval()
    return state.model


# -- inference helpers --------------------------------------------------------


@torch.no_grad()
def self_code(model: Animator, source: torch.Tensor):
    """Encoder output of the source and its self-reconstruction code z_{s->s}."""
    enc = model.encode(source)
    z_ss = lmd.navigate(enc.latent, model.path(enc.latent))
    return enc, z_ss


@torch.no_grad()
def render(model: Animator, z: torch.Tensor, features) -> np.ndarray:
    return _numpy(model.decode(z, features).image)


def _read_frames(folder: Path, resolution: int) -> list[tuple[str, np.ndarray]]:
    frames = []
    for path in sorted(folder.glob("*.png")):
        try:
            frames.append((path.name, data_mod.load_png(path, resolution)))
        except (OSError, ValueError) as exc:
            log.warning("skipping unreadable frame %s: %s", path, exc)
    return frames


@dataclass
class AnimateJob:
    checkpoint: Path
    source: Path
    driving: Path
    mode: str = "relative"
    out: Path = Path("animated")
    pose_threshold: float = POSE_WARN_THRESHOLD

    def __post_init__(self):
        if self.mode not in ("absolute", "relative"):
            raise CliError(f"mode must be 'absolute' or 'relative', got {self.mode!r}")


@torch.no_grad()
def animate(model: Animator, source: np.ndarray, frames: list[np.ndarray], mode: str,
            pose_threshold: float = POSE_WARN_THRESHOLD) -> list[np.ndarray]:
    enc = model.encode(_tensor(source))
    z_sr = enc.latent
    paths = [model.path(model.encode(_tensor(f)).latent) for f in frames]
    if mode == "absolute":
        codes = [lmd.absolute_transfer(z_sr, w_rt) for w_rt in paths]
    else:
        w_rs = model.path(z_sr)
        w_r1 = paths[0]
        gap = float((w_rs - w_r1).norm())
        scale = max(float(w_rs.norm()), float(w_r1.norm()), 1e-12)
        if gap / scale > pose_threshold:
            log.warning(
                "relative transfer: first driving frame pose differs from the source "
                "(relative path gap %.3f > %.3f); output poses may drift", gap / scale, pose_threshold)
        codes = [lmd.relative_transfer(z_sr, w_rs, w_rt, w_r1) for w_rt in paths]
    return [render(model, z, enc.features) for z in codes]


def cmd_animate(job: AnimateJob) -> list[Path]:
    model = load_model(job.checkpoint)
    res = model.cfg.resolution
    source = data_mod.load_png(job.source, res)
    frames = _read_frames(Path(job.driving), res)
    if not frames:
        raise CliError(f"no readable driving frames in {job.driving}")
    outputs = animate(model, source, [f for _, f in frames], job.mode, job.pose_threshold)
    out = Path(job.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for (name, _), image in zip(frames, outputs):
        path = out / name
        data_mod.save_png(image, path)
        written.append(path)
    return written


def parse_range(text: str) -> np.ndarray:
    try:
        lo, hi, count = text.split(":")
        lo, hi, n = float(lo), float(hi), int(count)
    except ValueError as exc:
        raise CliError(f"range must look like lo:hi:count, got {text!r}") from exc
    if n < 1 or not math.isfinite(lo) or not math.isfinite(hi) or (n > 1 and hi <= lo):
        raise CliError(f"range {text!r} is not well formed")
    return np.linspace(lo, hi, n)


@torch.no_grad()
def sweep(model: Animator, source: np.ndarray, index: int, alphas: np.ndarray) -> list[np.ndarray]:
    """Decode z_{s->s} + alpha * d_index for each alpha; ``index`` is 1-based."""
    directions = model.directions()
    if not 1 <= index <= directions.shape[0]:
        raise CliError(f"direction index {index} out of range 1..{directions.shape[0]}")
    enc, z_ss = self_code(model, _tensor(source))
    d = directions[index - 1]
    return [render(model, lmd.navigate(z_ss, float(a) * d), enc.features) for a in alphas]


def tile(images: list[np.ndarray]) -> np.ndarray:
    return np.concatenate(images, axis=2)


def cmd_sweep(checkpoint, source, index: int, alpha_range: str, out) -> Path:
    model = load_model(checkpoint)
    alphas = parse_range(alpha_range)
    tiles = sweep(model, data_mod.load_png(source, model.cfg.resolution), index, alphas)
    data_mod.save_png(tile(tiles), out)
    return Path(out)


@torch.no_grad()
def reference_image(model: Animator, source: np.ndarray) -> np.ndarray:
    """Warp the source by the flow decoded from z_{s->r} alone."""
    x = _tensor(source)
    z_sr = model.encode(x).latent
    flow = model.flow_generator(z_sr).flows[-1]
    return _numpy(bilinear_warp(x, flow))


def cmd_reference(checkpoint, source, out) -> Path:
    model = load_model(checkpoint)
    data_mod.save_png(reference_image(model, data_mod.load_png(source, model.cfg.resolution)), out)
    return Path(out)


# -- evaluation ----------------------------------------------------------------


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def model_predictor(model: Animator) -> Predictor:
    """Same-identity reconstruction: absolute transfer from the first frame."""

    @torch.no_grad()
    def predict(source: np.ndarray, targets: np.ndarray) -> np.ndarray:
        enc = model.encode(_tensor(source))
        z_dr = model.encode(torch.from_numpy(targets).float()).latent
        z = lmd.absolute_transfer(enc.latent, model.path(z_dr))
        feats = [f.expand(len(targets), -1, -1, -1) for f in enc.features]
        return model.decode(z, feats).image.numpy()

    return predict


def psnr(mse: float) -> float:
    if mse <= 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@dataclass
class EvalReport:
    per_sequence: list[tuple[str, float, float]]
    l1: float
    psnr: float

    def text(self) -> str:
        lines = [f"seq={sid} l1={l1:.6f} psnr={p:.4f}" for sid, l1, p in self.per_sequence]
        lines.append(f"overall l1={self.l1:.6f} psnr={self.psnr:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(predict: Predictor, dataset: list[data_mod.VideoSequence]) -> EvalReport:
    """First frame as source, remaining frames as driving targets.

    L1 and PSNR are measured on [0, 1] pixel values.
    """
    rows = []
    abs_sum = sq_sum = 0.0
    count = 0
    for seq in dataset:
        if len(seq) < 2:
            log.warning("sequence %s has fewer than 2 frames; skipped", seq.seq_id)
            continue
        targets = seq.frames[1:]
        pred = predict(seq.frames[0], targets)
        diff = (np.asarray(pred, dtype=np.float64) - targets.astype(np.float64)) / 2.0
        l1 = float(np.abs(diff).mean())
        mse = float((diff**2).mean())
        rows.append((seq.seq_id, l1, psnr(mse)))
        abs_sum += np.abs(diff).sum()
        sq_sum += (diff**2).sum()
        count += diff.size
    if not rows:
        raise CliError("evaluation data holds no usable sequence")
    return EvalReport(rows, abs_sum / count, psnr(sq_sum / count))


def _dataset_from_flags(args, resolution: int) -> list[data_mod.VideoSequence]:
    if args.data == "synthetic":
        return data_mod.synth_dataset(args.num_seqs, seed=args.data_seed, length=args.seq_len,
                                      params=data_mod.SynthParams(resolution=resolution))
    return data_mod.load_frame_folder(args.data, resolution)


def cmd_eval(checkpoint, dataset: list[data_mod.VideoSequence]) -> EvalReport:
    model = load_model(checkpoint)
    return evaluate(model_predictor(model), dataset)


def cmd_train(config: TrainConfig, out, metrics=None, resume: bool = False, checkpoint_every: int = 500,
              on_step=None) -> TrainState:
    out = Path(out)
    metrics = Path(metrics) if metrics else out.with_suffix(out.suffix + ".log")
    if resume and out.exists():
        state = load_checkpoint(out)
        state.config = dataclasses.replace(state.config, steps=config.steps)
    else:
        state = TrainState.fresh(config)
        metrics.write_text("")
    train(state, checkpoint=out, metrics=metrics, checkpoint_every=checkpoint_every, on_step=on_step)
    return state


# -- argument parsing ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lia", description="Latent image animator at desk scale.")
    sub = p.add_subparsers(dest="command", required=True)
    defaults = TrainConfig()

    t = sub.add_parser("train", help="train a model and write a checkpoint plus metrics log")
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--log", help="metrics log path (default: <out>.log)")
    t.add_argument("--data", default="synthetic", help="'synthetic' or a folder of frame folders")
    t.add_argument("--steps", type=int, default=defaults.steps)
    t.add_argument("--seed", type=int, default=defaults.seed)
    t.add_argument("--batch-size", type=int, default=defaults.batch_size)
    t.add_argument("--lr", type=float, default=defaults.lr)
    t.add_argument("--lam", type=float, default=defaults.lam, help="perceptual loss weight")
    t.add_argument("--latent-dim", type=int, default=defaults.latent_dim)
    t.add_argument("--dict-size", type=int, default=defaults.dict_size)
    t.add_argument("--base-channels", type=int, default=defaults.base_channels)
    t.add_argument("--resolution", type=int, default=defaults.resolution)
    t.add_argument("--no-dictionary", action="store_true", help="ablation: predict the latent path directly")
    t.add_argument("--clip-norm", type=float, default=defaults.clip_norm, help="global grad-norm clip; <= 0 disables")
    t.add_argument("--num-seqs", type=int, default=defaults.num_seqs)
    t.add_argument("--seq-len", type=int, default=defaults.seq_len)
    t.add_argument("--data-seed", type=int, default=defaults.data_seed)
    t.add_argument("--checkpoint-every", type=int, default=500)
    t.add_argument("--resume", action="store_true", help="continue from --out if it exists")

    a = sub.add_parser("animate", help="transfer motion from a driving frame folder onto a source image")
    a.add_argument("--checkpoint", required=True)
    a.add_argument("--source", required=True)
    a.add_argument("--driving", required=True, help="folder of PNG frames")
    a.add_argument("--mode", choices=("absolute", "relative"), default="relative")
    a.add_argument("--out", required=True, help="output folder")
    a.add_argument("--pose-threshold", type=float, default=POSE_WARN_THRESHOLD)

    s = sub.add_parser("sweep", help="walk the source code along one dictionary direction")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--source", required=True)
    s.add_argument("--direction", type=int, required=True, help="1-based direction index")
    s.add_argument("--range", default="-3:3:7", dest="alpha_range", help="lo:hi:count")
    s.add_argument("--out", required=True)

    r = sub.add_parser("reference", help="render the canonical-pose reference image of a source")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--source", required=True)
    r.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="same-identity reconstruction metrics")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", default="synthetic", help="'synthetic' or a folder of frame folders")
    e.add_argument("--num-seqs", type=int, default=8)
    e.add_argument("--seq-len", type=int, default=defaults.seq_len)
    e.add_argument("--data-seed", type=int, default=999, help="seed of held-out synthetic sequences")
    e.add_argument("--report", help="also write the report here")
    return p


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    return TrainConfig(
        latent_dim=args.latent_dim, dict_size=args.dict_size, lam=args.lam, lr=args.lr,
        batch_size=args.batch_size, steps=args.steps, seed=args.seed, resolution=args.resolution,
        base_channels=args.base_channels, use_dictionary=not args.no_dictionary,
        clip_norm=args.clip_norm, data=args.data, num_seqs=args.num_seqs,
        seq_len=args.seq_len, data_seed=args.data_seed,
    )


def _apply_thread_limit() -> None:
    limit = os.environ.get("LIA_THREADS")
    if limit:
        torch.set_num_threads(max(1, int(limit)))


def _join_range(argv: list[str]) -> list[str]:
    """argparse reads ``--range -3:3:7`` as two flags; glue the value on."""
    out = []
    it = iter(argv)
    for tok in it:
        if tok == "--range":
            nxt = next(it, None)
            out.append(tok if nxt is None else f"--range={nxt}")
        else:
            out.append(tok)
    return out


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_range(argv))
    _apply_thread_limit()
    try:
        if args.command == "train":
            state = cmd_train(config_from_args(args), args.out, args.log, args.resume, args.checkpoint_every)
            log.info("trained to step %d; checkpoint %s", state.step, args.out)
        elif args.command == "animate":
            job = AnimateJob(Path(args.checkpoint), Path(args.source), Path(args.driving), args.mode,
                             Path(args.out), args.pose_threshold)
            written = cmd_animate(job)
            log.info("wrote %d frames to %s", len(written), args.out)
        elif args.command == "sweep":
            cmd_sweep(args.checkpoint, args.source, args.direction, args.alpha_range, args.out)
        elif args.command == "reference":
            cmd_reference(args.checkpoint, args.source, args.out)
        elif args.command == "eval":
            model = load_model(args.checkpoint)
            report = evaluate(model_predictor(model), _dataset_from_flags(args, model.cfg.resolution))
            text = report.text()
            sys.stdout.write(text)
            if args.report:
                Path(args.report).write_text(text)
    except (CliError, CheckpointError, data_mod.DatasetError, ValueError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
