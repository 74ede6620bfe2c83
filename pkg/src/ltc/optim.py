"""Momentum SGD, the milestone schedule, and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .data import augment

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainSchedule:
    initial_lr: float
    milestones: tuple
    total_iterations: int
    batch_size: int
    momentum: float = 0.9
    weight_decay: float = 5e-3
    lr_decay: float = 0.1
    wd_decay: float = 0.1
    dropout: float = 0.9

    def __post_init__(self):
        ms = tuple(self.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing: {ms}")
        if ms and ms[-1] >= self.total_iterations:
            raise ValueError("milestones must lie before the last iteration")
        if self.initial_lr <= 0 or self.total_iterations < 1 or self.batch_size < 1:
            raise ValueError("learning rate, iterations and batch size must be positive")
        if self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("need weight_decay >= 0 and momentum in [0, 1)")
        if not (0 < self.lr_decay <= 1 and 0 < self.wd_decay <= 1):
            raise ValueError("decay factors must be in (0, 1]")

    def scaled(self, factor):
        """Divide every iteration count by ``factor`` (rounding up); batch size is kept."""
        if factor < 1:
            raise ValueError("scale factor must be >= 1")
        return replace(
            self,
            milestones=tuple(math.ceil(m / factor) for m in self.milestones),
            total_iterations=math.ceil(self.total_iterations / factor),
        )


_BASE = {
    # dataset: (milestones, total) for 16-frame networks
    "ucf101": ((80_000, 125_000), 145_000),
    "hmdb51": ((60_000,), 70_000),
}
_EXTENT = {"16f": (1, 30), "60f": (2, 15), "100f": (3, 10)}


def preset_names():
    names = []
    for ds in _BASE:
        for ext in _EXTENT:
            names += [f"{ds}-{ext}", f"{ds}-{ext}-finetune"]
    return names


def preset(name, scale=1):
    parts = name.split("-")
    finetune = parts[-1] == "finetune"
    if finetune:
        parts = parts[:-1]
    if len(parts) != 2 or parts[0] not in _BASE or parts[1] not in _EXTENT:
        raise KeyError(f"unknown schedule preset {name!r}; choose from {', '.join(preset_names())}")
    milestones, total = _BASE[parts[0]]
    mult, batch = _EXTENT[parts[1]]
    sched = TrainSchedule(
        initial_lr=3e-4 if finetune else 3e-3,
        milestones=tuple(m * mult for m in milestones),
        total_iterations=total * mult,
        batch_size=batch,
        dropout=0.5 if finetune else 0.9,
    )
    return sched.scaled(scale) if scale != 1 else sched


def lr_at(schedule, iteration):
    """(learning rate, weight decay) in effect at ``iteration``."""
    if not 0 <= iteration < schedule.total_iterations:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.total_iterations})")
    passed = sum(iteration >= m for m in schedule.milestones)
    return (
        schedule.initial_lr * schedule.lr_decay ** passed,
        schedule.weight_decay * schedule.wd_decay ** passed,
    )


@dataclass
class OptimizerState:
    velocities: list
    iteration: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params])


def sgd_step(params, grads, state, lr, momentum, weight_decay):
    """v <- m v - lr (g + wd w);  w <- w + v.  Updates ``params`` in place."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    if len(params) != len(grads) or len(params) != len(state.velocities):
        raise ValueError("params, grads and velocities must align")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} != param shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; step aborted")
    for p, g, v in zip(params, grads, state.velocities):
        v *= momentum
        v -= lr * (g + weight_decay * p)
        p += v
    return params, state


@dataclass
class LogRecord:
    iteration: int
    lr: float
    wd: float
    loss: float
    batch_accuracy: float

    def line(self):
        return f"{self.iteration}\t{self.lr:.6g}\t{self.wd:.6g}\t{self.loss:.6f}\t{self.batch_accuracy:.4f}"


@dataclass
class TrainResult:
    net: object
    log: list = field(default_factory=list)


def train(net, dataset, schedule, aug, seed, log_every=10, on_log=None):
    """Mini-batch SGD over ``dataset``, a list of (VideoVolume, label index).

    Clips are drawn by epoch-wise shuffling; every batch member is augmented
    independently.  One generator seeded from ``seed`` drives sampling,
    augmentation and dropout, so a run is reproducible bit for bit.
    """
    if not dataset:
        raise ValueError("empty training set")
    modality = {v.modality for v, _ in dataset}
    if modality != {net.spec.modality}:
        raise ValueError(f"dataset modality {modality} does not match network {net.spec.modality}")
    rng = np.random.default_rng(seed)
    params = net.parameters()
    state = OptimizerState.zeros_like(params)
    result = TrainResult(net)
    order, cursor = rng.permutation(len(dataset)), 0
    for it in range(schedule.total_iterations):
        idx = []
        while len(idx) < schedule.batch_size:
            if cursor == len(order):
                order, cursor = rng.permutation(len(dataset)), 0
            idx.append(order[cursor])
            cursor += 1
        x = np.stack([augment(dataset[i][0], aug, rng).data for i in idx])
        y = np.array([dataset[i][1] for i in idx])
        loss, probs, grads = net.loss_and_grads(x, y, rng)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss at iteration {it}")
        lr, wd = lr_at(schedule, it)
        sgd_step(params, grads, state, lr, schedule.momentum, wd)
        state.iteration += 1
        if (it + 1) % log_every == 0 or it == schedule.total_iterations - 1:
            acc = float(np.mean(probs.argmax(axis=1) == y))
            rec = LogRecord(it, lr, wd, loss, acc)
            result.log.append(rec)
            log.debug(rec.line())
            if on_log is not None:
                on_log(rec)
    return result
