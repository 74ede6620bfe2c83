"""Test-time protocol, accuracy metrics, late fusion and extent analysis."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import center_offsets, crop, flip_volume, pad_temporal


class TableError(ValueError):
    pass


@dataclass
class ScoreTable:
    """Per-video class-score vectors with a fixed class order."""

    classes: list
    scores: dict  # video id -> np.ndarray of len(classes)
    provenance: str = ""

    def __post_init__(self):
        self.classes = list(self.classes)
        for vid, s in self.scores.items():
            s = np.asarray(s, dtype=np.float64)
            if s.shape != (len(self.classes),):
                raise TableError(f"{vid}: score vector length {s.shape} != {len(self.classes)} classes")
            if not np.all(np.isfinite(s)):
                raise TableError(f"{vid}: non-finite score")
            self.scores[vid] = s

    @property
    def ids(self):
        return list(self.scores)

    def predictions(self):
        return {vid: self.classes[int(np.argmax(s))] for vid, s in self.scores.items()}

    def save(self, path):
        lines = []
        if self.provenance:
            lines.append(f"# provenance: {self.provenance}")
        lines.append("\t".join(["id", *self.classes]))
        for vid, s in self.scores.items():
            lines.append("\t".join([vid, *(f"{float(np.float32(x)):.9g}" for x in s)]))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        provenance, header, scores = "", None, {}
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            if not line.strip():
                continue
            if line.startswith("#"):
                if line.startswith("# provenance:"):
                    provenance = line.split(":", 1)[1].strip()
                continue
            fields = line.split("\t")
            if header is None:
                header = fields[1:]
                continue
            if len(fields) != len(header) + 1:
                raise TableError(f"{path}:{lineno}: expected {len(header) + 1} fields")
            if fields[0] in scores:
                raise TableError(f"{path}:{lineno}: duplicate video id {fields[0]!r}")
            scores[fields[0]] = np.array([float(x) for x in fields[1:]])
        if header is None:
            raise TableError(f"{path}: missing class header")
        return cls(header, scores, provenance)


# ---------------------------------------------------------------------------
# Test-time protocol


def sliding_clips(volume, frames, stride=4):
    """``frames``-long clips starting at 0, stride, 2*stride, ...; short videos are padded."""
    if frames < 1:
        raise ValueError("clip extent must be >= 1")
    if volume.frames < frames:
        return [pad_temporal(volume, frames)]
    starts = range(0, volume.frames - frames + 1, stride)
    return [volume.with_data(volume.data[:, s:s + frames]) for s in starts]


def crop_offsets(width, height, crop_w, crop_h):
    """(x, y) of the TL, TR, BL, BR and centre crops."""
    if width < crop_w or height < crop_h:
        raise ValueError(f"clip {width}x{height} smaller than crop {crop_w}x{crop_h}")
    xr, yb = width - crop_w, height - crop_h
    return [(0, 0), (xr, 0), (0, yb), (xr, yb), (center_offsets(width, crop_w), center_offsets(height, crop_h))]


def ten_crops(clip, crop_w, crop_h):
    crops = [crop(clip, x, y, 0, crop_w, crop_h, clip.frames)
             for x, y in crop_offsets(clip.width, clip.height, crop_w, crop_h)]
    return crops + [flip_volume(c) for c in crops]


def clip_scores(net, volume, stride=4):
    """(n_clips, n_classes): softmax averaged over the ten crops of each clip."""
    spec = net.spec
    rows = []
    for clip in sliding_clips(volume, spec.frames, stride):
        offsets = crop_offsets(clip.width, clip.height, spec.width, spec.height)
        # coinciding crops (e.g. clip size == crop size) are scored once and reused
        unique = list(dict.fromkeys(offsets))
        pick = [unique.index(o) for o in offsets]
        crops = [crop(clip, x, y, 0, spec.width, spec.height, clip.frames) for x, y in unique]
        batch = np.stack([c.data for c in crops + [flip_volume(c) for c in crops]])
        p = net.forward(batch).astype(np.float64)
        n = len(unique)
        rows.append(p[pick + [n + i for i in pick]].mean(axis=0))
    return np.array(rows)


def score_video(net, volume, stride=4):
    """Video score: mean softmax over every (clip, crop) pair."""
    if volume.modality != net.spec.modality:
        raise ValueError(f"{volume.modality} volume given to a {net.spec.modality} network")
    return clip_scores(net, volume, stride).mean(axis=0)


def score_videos(net, videos, classes, stride=4, provenance=""):
    """Score (id, volume) pairs; returns (ScoreTable, {id: per-clip scores})."""
    scores, per_clip = {}, {}
    for vid, vol in videos:
        cs = clip_scores(net, vol, stride)
        per_clip[vid] = cs
        scores[vid] = cs.mean(axis=0)
    return ScoreTable(classes, scores, provenance), per_clip


# ---------------------------------------------------------------------------
# Metrics


def clip_accuracy(predictions, labels):
    """Fraction of correct argmax decisions; ``predictions`` holds score rows."""
    predictions = np.atleast_2d(np.asarray(predictions))
    labels = np.asarray(labels)
    if predictions.shape[0] != labels.shape[0]:
        raise ValueError("one label per prediction required")
    if labels.size == 0:
        raise ValueError("no predictions to score")
    return float(np.mean(predictions.argmax(axis=1) == labels))


def video_accuracy(table, labels):
    """Fraction of videos whose top-scoring class equals ``labels[id]`` (class names)."""
    if not table.scores:
        raise ValueError("empty score table")
    correct = 0
    for vid, s in table.scores.items():
        if vid not in labels:
            raise KeyError(f"unknown video id {vid!r}")
        correct += table.classes[int(np.argmax(s))] == labels[vid]
    return correct / len(table.scores)


def per_class_accuracy(table, labels):
    hits = {c: [] for c in table.classes}
    for vid, s in table.scores.items():
        if vid not in labels:
            raise KeyError(f"unknown video id {vid!r}")
        hits[labels[vid]].append(table.classes[int(np.argmax(s))] == labels[vid])
    return {c: float(np.mean(h)) if h else float("nan") for c, h in hits.items()}


# ---------------------------------------------------------------------------
# Fusion


def late_fusion(tables, weights=None, provenance="fusion"):
    """Weighted mean of video-level score vectors; weights are normalised to sum 1."""
    if not tables:
        raise TableError("nothing to fuse")
    first = tables[0]
    for t in tables[1:]:
        if t.classes != first.classes:
            raise TableError(f"class lists differ: {first.provenance or 'table 0'} vs {t.provenance or 'table'}")
        if set(t.scores) != set(first.scores):
            raise TableError("video id sets differ between tables")
    w = np.ones(len(tables)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(tables),) or np.any(w < 0) or not w.sum() > 0:
        raise ValueError("need one nonnegative weight per table, not all zero")
    w = w / w.sum()
    fused = {}
    for vid in first.scores:
        acc = np.zeros(len(first.classes))
        for wi, t in zip(w, tables):
            acc += wi * t.scores[vid]
        fused[vid] = acc
    return ScoreTable(first.classes, fused, provenance)


# ---------------------------------------------------------------------------
# Temporal-extent analysis


@dataclass
class ExtentAnalysis:
    extents: list
    classes: list
    p: np.ndarray  # (classes, extents) accuracy
    best: dict = field(default_factory=dict)  # extent -> classes whose max is attained there
    gain: dict = field(default_factory=dict)  # extent -> d(t), or None when no class peaks there

    def counts(self):
        return {t: len(self.best[t]) for t in self.extents}

    def to_dict(self):
        return {
            "extents": list(self.extents),
            "classes": list(self.classes),
            "p": {c: dict(zip(map(str, self.extents), map(float, row))) for c, row in zip(self.classes, self.p)},
            "M": {str(t): self.best[t] for t in self.extents},
            "M_size": {str(t): len(self.best[t]) for t in self.extents},
            "d": {str(t): self.gain[t] for t in self.extents},
        }


def extent_analysis(p, extents, classes=None):
    """Classes peaking at each extent and their mean max-minus-min accuracy gap.

    ``p`` is indexed [class][extent].  A class whose maximum is attained at
    several extents belongs to each of them.
    """
    rows = [list(r) for r in p]
    if not rows or any(len(r) != len(extents) for r in rows):
        raise ValueError("accuracy table is ragged or empty")
    arr = np.array(rows, dtype=np.float64)
    classes = list(classes) if classes is not None else list(range(len(rows)))
    top = arr.max(axis=1)
    spread = top - arr.min(axis=1)
    best, gain = {}, {}
    for j, t in enumerate(extents):
        members = [i for i in range(len(rows)) if arr[i, j] == top[i]]
        best[t] = [classes[i] for i in members]
        gain[t] = float(np.mean(spread[members])) if members else None
    return ExtentAnalysis(list(extents), classes, arr, best, gain)
