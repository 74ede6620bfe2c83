"""Synthetic shared-prefix action videos.

Every clip shows one blob.  For the first ``prefix_fraction`` of the frames all
clips are identical: the blob starts at the same place and translates with
the same velocity.  The suffix holds two short strokes (move out, come back)
separated by 15 still frames, so no 16-frame window can see both.  Each
stroke on its own has a uniformly random direction and speed; the class is
the *relation* between the strokes (same or opposite direction, speed offset).
Short clips therefore carry no class information, long clips do.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, Record, VideoVolume, resize, write_volume

DIRECTIONS = ((1, 0), (0, 1), (-1, 0), (0, -1))
STROKE = 3  # frames out, then the same number back
GAP = 16  # last frame of stroke A to first frame of stroke B


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 4
    clips_per_class: int = 70
    width: int = 32
    height: int = 32
    frames: int = 80
    prefix_fraction: float = 0.5
    noise_sigma: float = 0.2
    train_fraction: float = 0.7
    prefix_speed: float = 0.25
    blob_radius: float = 3.0
    rgb_clutter: float = 0.5
    fps: float = 25.0
    group_size: int = 1

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("need at least one class")
        if not 0 < self.prefix_fraction < 1:
            raise ValueError("prefix_fraction must be in (0, 1)")
        if not 0 < self.train_fraction < 1:
            raise ValueError("train_fraction must be in (0, 1)")
        if self.frames < 16:
            raise ValueError("frames must be >= 16")
        if self.clips_per_class < 2 or self.noise_sigma < 0 or self.group_size < 1:
            raise ValueError("need >= 2 clips per class, noise_sigma >= 0, group_size >= 1")

    @property
    def prefix_frames(self):
        return int(round(self.prefix_fraction * self.frames))

    @property
    def speeds(self):
        return tuple(range(1, math.ceil(self.num_classes / 2) + 1))


def class_relation(c, cfg):
    """(opposite_direction, speed_offset) defining class ``c``."""
    return c % 2 == 1, c // 2


def stroke_layout(cfg):
    """(start of stroke A, start of stroke B, stroke half-length)."""
    P, S = cfg.prefix_frames, cfg.frames - cfg.prefix_frames
    half = STROKE if S >= 4 * STROKE + GAP - 1 else max(1, S // 4)
    gap = min(GAP, S - 4 * half + 1)
    a = P
    b = a + 2 * half - 1 + max(gap, 1)
    return a, b, half


def velocities(cfg, label, rng):
    """Per-frame blob velocity (F, 2) for one clip of class ``label``."""
    v = np.zeros((cfg.frames, 2))
    P = cfg.prefix_frames
    v[:P, 0] = cfg.prefix_speed
    opposite, offset = class_relation(label, cfg)
    speeds = cfg.speeds
    d1 = np.array(DIRECTIONS[rng.integers(len(DIRECTIONS))], float)
    i1 = int(rng.integers(len(speeds)))
    d2 = -d1 if opposite else d1
    s1, s2 = speeds[i1], speeds[(i1 + offset) % len(speeds)]
    a, b, half = stroke_layout(cfg)
    for start, d, s in ((a, d1, s1), (b, d2, s2)):
        v[start:start + half] = s * d
        v[start + half:start + 2 * half] = -s * d
    return v


def _positions(cfg, vel):
    start = np.array([cfg.width * 0.25, cfg.height * 0.5])
    return start + np.concatenate([np.zeros((1, 2)), np.cumsum(vel, axis=0)[:-1]])


def render(cfg, vel, rng):
    """Clean flow (2, T, H, W) and RGB (3, T, H, W) for a velocity sequence."""
    T, H, W = cfg.frames, cfg.height, cfg.width
    pos = _positions(cfg, vel)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    d2 = (xx[None] - pos[:, 0, None, None]) ** 2 + (yy[None] - pos[:, 1, None, None]) ** 2
    support = d2 <= cfg.blob_radius ** 2
    flow = np.zeros((2, T, H, W))
    flow[0] = support * vel[:, 0, None, None]
    flow[1] = support * vel[:, 1, None, None]
    alpha = np.exp(-d2 / (2 * (cfg.blob_radius / 1.5) ** 2))
    coarse = rng.random((3, 1, 4, 4))
    background = cfg.rgb_clutter * resize(coarse, W, H)
    colour = np.array([1.0, 0.9, 0.7])[:, None, None, None]
    rgb = background * (1 - alpha[None]) + colour * alpha[None]
    return flow, rgb


def synth_generate(cfg, seed, out_dir):
    """Write a two-modality dataset (volumes, manifests, class list) to ``out_dir``."""
    out = Path(out_dir)
    (out / "volumes").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    classes = [f"c{c}" for c in range(cfg.num_classes)]
    n_train = int(round(cfg.train_fraction * cfg.clips_per_class))
    n_train = min(max(n_train, 1), cfg.clips_per_class - 1)
    records = {"flow": [], "rgb": []}
    for c in range(cfg.num_classes):
        for i in range(cfg.clips_per_class):
            vid = f"c{c}_v{i:03d}"
            vel = velocities(cfg, c, rng)
            flow, rgb = render(cfg, vel, rng)
            flow = flow + rng.normal(0, cfg.noise_sigma, flow.shape) if cfg.noise_sigma else flow
            split = "train" if i < n_train else "test"
            group = f"c{c}_g{i // cfg.group_size:03d}"
            for modality, data in (("flow", flow), ("rgb", rgb)):
                rel = f"volumes/{vid}_{modality}.ltcv"
                write_volume(VideoVolume(data.astype(np.float32), modality, cfg.fps), out / rel)
                records[modality].append(Record(vid, rel, classes[c], split, cfg.frames, group))
    for modality, recs in records.items():
        Manifest(out, classes, recs).save(manifest=f"manifest_{modality}.tsv")
    lines = [f"{k}={v}" for k, v in asdict(cfg).items()] + [f"seed={seed}"]
    (out / "synth.cfg").write_text("\n".join(lines) + "\n")
    return out
