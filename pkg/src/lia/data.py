"""Procedural articulated-shape videos and PNG frame-folder I/O.

Each synthetic sequence shows one identity (body shape, colours, size) moving
smoothly: body translation, rotation and a slight breathing scale, plus a limb
that swings and stretches. Rendering is 4x4 supersampled for anti-aliasing.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

RESOLUTION = 64
SUPERSAMPLE = 4
BACKGROUND = np.array([0.10, 0.10, 0.15])
SHAPE_KINDS = ("ellipse", "box", "diamond")
MOTION_FIELDS = ("x", "y", "rotation", "breath", "limb_angle", "limb_length")


class DatasetError(RuntimeError):
    pass


@dataclass
class VideoSequence:
    frames: np.ndarray  # T x 3 x H x W float32 in [-1, 1]
    identity: dict
    motion: np.ndarray  # T x len(MOTION_FIELDS)
    seq_id: str = ""

    def __len__(self) -> int:
        return len(self.frames)


@dataclass
class FramePair:
    source: np.ndarray
    driving: np.ndarray
    seq_id: str
    indices: tuple[int, int]


@dataclass
class SynthParams:
    resolution: int = RESOLUTION
    max_step: float = 1.5  # px per frame per axis, body centre
    travel: float = 6.0  # px, trajectory amplitude around the frame centre


def _smooth_track(rng: np.random.Generator, t: np.ndarray, amplitude: float, max_rate: float) -> np.ndarray:
    """Sum of two random sinusoids with total amplitude and slope bounded."""
    omegas = rng.uniform(0.06, 0.2, size=2)
    phases = rng.uniform(0, 2 * np.pi, size=2)
    weights = rng.dirichlet([2.0, 2.0])
    # amplitude per harmonic limited so that sum_k a_k * w_k <= max_rate
    amps = weights * amplitude
    rate = float(np.sum(amps * omegas))
    if rate > max_rate:
        amps = amps * (max_rate / rate)
    return sum(a * np.sin(w * t + p) for a, w, p in zip(amps, omegas, phases))


def _identity(rng: np.random.Generator) -> dict:
    kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
    body = rng.uniform(0.35, 1.0, size=3)
    body[int(rng.integers(3))] = rng.uniform(0.8, 1.0)
    limb = rng.uniform(0.2, 1.0, size=3)
    limb[int(rng.integers(3))] = rng.uniform(0.85, 1.0)
    return {
        "kind": kind,
        "body_color": body.round(4).tolist(),
        "limb_color": limb.round(4).tolist(),
        "radii": rng.uniform(7.0, 11.0, size=2).round(3).tolist(),
        "scale": float(round(rng.uniform(0.85, 1.15), 3)),
        "attach": float(round(rng.uniform(0, 2 * np.pi), 4)),
        "limb_length": float(round(rng.uniform(8.0, 12.0), 3)),
        "limb_width": float(round(rng.uniform(2.0, 3.0), 3)),
    }


def _motion(rng: np.random.Generator, length: int, params: SynthParams) -> np.ndarray:
    t = np.arange(length, dtype=np.float64)
    centre = params.resolution / 2.0 - 0.5
    x = centre + rng.uniform(-4, 4) + _smooth_track(rng, t, params.travel, params.max_step)
    y = centre + rng.uniform(-4, 4) + _smooth_track(rng, t, params.travel, params.max_step)
    rotation = rng.uniform(-0.4, 0.4) + _smooth_track(rng, t, 0.6, 0.05)
    breath = _smooth_track(rng, t, 0.08, 0.01)
    limb_angle = _smooth_track(rng, t, 1.0, 0.15)
    limb_length = _smooth_track(rng, t, 0.25, 0.03)
    return np.stack([x, y, rotation, breath, limb_angle, limb_length], axis=1)


def _render(identity: dict, pose: np.ndarray, resolution: int) -> np.ndarray:
    s = SUPERSAMPLE
    offs = (np.arange(resolution * s) + 0.5) / s - 0.5
    py, px = np.meshgrid(offs, offs, indexing="ij")
    cx, cy, rot, breath, limb_angle, limb_stretch = pose
    scale = identity["scale"] * (1.0 + breath)
    rx, ry = (r * scale for r in identity["radii"])
    c, sn = np.cos(rot), np.sin(rot)
    dx, dy = px - cx, py - cy
    lx = c * dx + sn * dy
    ly = -sn * dx + c * dy
    kind = identity["kind"]
    if kind == "ellipse":
        body = (lx / rx) ** 2 + (ly / ry) ** 2 <= 1.0
    elif kind == "box":
        body = (np.abs(lx) <= rx) & (np.abs(ly) <= ry)
    else:
        body = np.abs(lx) / rx + np.abs(ly) / ry <= 1.0

    beta = identity["attach"]
    ax_l, ay_l = 0.7 * rx * np.cos(beta), 0.7 * ry * np.sin(beta)
    ax = cx + c * ax_l - sn * ay_l
    ay = cy + sn * ax_l + c * ay_l
    ang = rot + beta + limb_angle
    ux, uy = np.cos(ang), np.sin(ang)
    length = identity["limb_length"] * scale * (1.0 + limb_stretch)
    proj = np.clip((px - ax) * ux + (py - ay) * uy, 0.0, length)
    dist2 = (px - ax - proj * ux) ** 2 + (py - ay - proj * uy) ** 2
    limb = dist2 <= (identity["limb_width"] * scale) ** 2

    img = np.empty((3,) + px.shape)
    for ch in range(3):
        plane = np.full(px.shape, BACKGROUND[ch])
        plane[body] = identity["body_color"][ch]
        plane[limb] = identity["limb_color"][ch]
        img[ch] = plane
    img = img.reshape(3, resolution, s, resolution, s).mean(axis=(2, 4))
    return (img * 2.0 - 1.0).astype(np.float32)


def synth_sequence(seed: int, length: int = 32, params: SynthParams | None = None) -> VideoSequence:
    """Deterministic articulated-shape video for ``seed``."""
    if length < 2:
        raise ValueError(f"synth_sequence: need at least 2 frames, got {length}")
    params = params or SynthParams()
    rng = np.random.default_rng(seed)
    identity = _identity(rng)
    motion = _motion(rng, length, params)
    frames = np.stack([_render(identity, pose, params.resolution) for pose in motion])
    return VideoSequence(frames=frames, identity=identity, motion=motion, seq_id=f"synth{seed}")


def synth_dataset(count: int, seed: int = 0, length: int = 32, params: SynthParams | None = None) -> list[VideoSequence]:
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [synth_sequence(int(s), length, params) for s in seeds]


def sample_pair(dataset: list[VideoSequence], rng: np.random.Generator) -> FramePair:
    """Uniform sequence, then two distinct uniform frames from it."""
    usable = []
    for seq in dataset:
        if len(seq) < 2:
            log.warning("sequence %s has %d frame(s); skipped", seq.seq_id, len(seq))
        else:
            usable.append(seq)
    if not usable:
        raise DatasetError("sample_pair: no sequence with at least 2 frames")
    seq = usable[int(rng.integers(len(usable)))]
    i, j = rng.choice(len(seq), size=2, replace=False)
    return FramePair(seq.frames[i], seq.frames[j], seq.seq_id, (int(i), int(j)))


def to_uint8(image: np.ndarray) -> np.ndarray:
    """C x H x W in [-1, 1] -> H x W x C bytes, rounding half up."""
    arr = np.asarray(image, dtype=np.float64)
    q = np.floor((np.clip(arr, -1.0, 1.0) + 1.0) * 127.5 + 0.5)
    return q.clip(0, 255).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32).transpose(2, 0, 1) / 127.5 - 1.0).astype(np.float32)


def save_png(image: np.ndarray, path: str | Path) -> None:
    Image.fromarray(to_uint8(image)).save(path, format="PNG")


def load_png(path: str | Path, resolution: int = RESOLUTION) -> np.ndarray:
    """Decode, centre-crop to a square, resize, map to [-1, 1]."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        w, h = im.size
        side = min(w, h)
        left, top = (w - side) // 2, (h - side) // 2
        im = im.crop((left, top, left + side, top + side))
        if side != resolution:
            im = im.resize((resolution, resolution), Image.Resampling.BICUBIC)
        return from_uint8(np.asarray(im))


def load_frame_folder(path: str | Path, resolution: int = RESOLUTION) -> list[VideoSequence]:
    """One sequence per subdirectory; frames in lexicographic filename order."""
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    dataset = []
    for sub in sorted(p for p in root.iterdir() if p.is_dir()):
        files = sorted(sub.glob("*.png"))
        if not files:
            continue
        try:
            frames = np.stack([load_png(f, resolution) for f in files])
        except (OSError, ValueError) as exc:
            log.warning("skipping sequence %s: %s", sub.name, exc)
            continue
        dataset.append(VideoSequence(frames, {"source": str(sub)}, np.zeros((len(files), 0)), sub.name))
    if not dataset:
        raise DatasetError(f"no readable frame sequences under {root}")
    return dataset


def write_frame_folder(dataset: list[VideoSequence], path: str | Path) -> Path:
    root = Path(path)
    for seq in dataset:
        sub = root / seq.seq_id
        sub.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(seq.frames):
            save_png(frame, sub / f"{t:05d}.png")
    return root
