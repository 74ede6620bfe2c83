"""Desk-scale training/evaluation arms shared by the acceptance suite and scripts/."""
from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AugmentationConfig, Manifest, load_split
from .eval import score_videos, video_accuracy
from .network import NetworkSpec, build
from .optim import TrainSchedule, train
from .synth import SynthConfig, synth_generate

# 4 classes, 50 train + 20 test clips each, 32x32, 80 frames, half the clip shared.
BENCHMARK = SynthConfig(num_classes=4, clips_per_class=70, width=32, height=32, frames=80,
                        prefix_fraction=0.5, train_fraction=50 / 70)


@dataclass(frozen=True)
class DeskConfig:
    """Network and schedule sizes that train in minutes on one CPU core."""

    conv_channels: tuple = (4, 8, 16, 16, 16)
    fc_sizes: tuple = (128, 128)
    dropout: float = 0.0
    lr: float = 0.01
    iterations: int = 400
    milestone: float = 0.8  # fraction of the run after which lr and wd drop 10x
    batch_size: int = 10
    weight_decay: float = 0.0
    multiscale: bool = False
    flip: bool = True
    stride: int = 4

    def schedule(self):
        return TrainSchedule(self.lr, (int(self.iterations * self.milestone),), self.iterations,
                             self.batch_size, weight_decay=self.weight_decay, dropout=self.dropout)


@dataclass
class ArmResult:
    modality: str
    frames: int
    seed: int
    net: object
    table: object
    video_accuracy: float
    final_loss: float
    seconds: float


def ensure_benchmark(root, seed=0, cfg=BENCHMARK):
    """Generate the synthetic benchmark under ``root`` unless it is already there."""
    root = Path(root)
    if not (root / "manifest_flow.tsv").exists():
        synth_generate(cfg, seed, root)
    return root


def load_benchmark(root, modality):
    m = Manifest.load(root, manifest=f"manifest_{modality}.tsv")
    return m, load_split(m, "train"), load_split(m, "test")


def run_arm(root, modality, frames, seed, desk=DeskConfig(), splits=None):
    """Train one network on the benchmark and score its test split with the full protocol."""
    t0 = time.time()
    manifest, tr, te = splits or load_benchmark(root, modality)
    first = tr[0][1]
    spec = NetworkSpec(modality, first.width, first.height, frames, len(manifest.classes),
                       dropout=desk.dropout, conv_channels=desk.conv_channels, fc_sizes=desk.fc_sizes)
    net = build(spec, seed)
    aug = AugmentationConfig(spec.width, spec.height, frames, multiscale=desk.multiscale, flip=desk.flip)
    res = train(net, [(v, label) for _, v, label in tr], desk.schedule(), aug, seed)
    table, _ = score_videos(net, [(r.id, v) for r, v, _ in te], manifest.classes, stride=desk.stride,
                            provenance=f"{modality}-{frames}f-seed{seed}")
    acc = video_accuracy(table, manifest.labels())
    return ArmResult(modality, frames, seed, net, table, acc, res.log[-1].loss, time.time() - t0)


def mean_accuracy(results):
    return float(np.mean([r.video_accuracy for r in results]))
