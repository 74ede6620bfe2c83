"""Video volumes on disk, manifests, flow preprocessing and augmentation."""
from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .numerics import Tensor

MAGIC = b"LTCV"
VERSION = 1
MODALITY_CHANNELS = {"flow": 2, "rgb": 3}
MODALITY_CODES = {"rgb": 0, "flow": 1}
_HEADER = "<4sIB4I2If"
HEADER_SIZE = struct.calcsize(_HEADER)
SCALE_COEFFICIENTS = (1.0, 0.875, 0.75, 0.66)
SPLITS = ("train", "test")


class DataError(ValueError):
    pass


@dataclass
class VideoVolume:
    """A (C, T, H, W) float32 video.  Flow channels are (flow-x, flow-y) in pixels."""

    data: np.ndarray
    modality: str
    fps: float = 25.0
    orig_width: int = 0
    orig_height: int = 0

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.modality not in MODALITY_CHANNELS:
            raise DataError(f"unknown modality {self.modality!r}")
        if self.data.ndim != 4 or self.data.shape[0] != MODALITY_CHANNELS[self.modality]:
            raise DataError(f"{self.modality} volume needs {MODALITY_CHANNELS[self.modality]} channels, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise DataError("empty volume")
        if not self.orig_width:
            self.orig_width = self.width
        if not self.orig_height:
            self.orig_height = self.height

    @property
    def frames(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[2]

    @property
    def width(self):
        return self.data.shape[3]

    @property
    def tensor(self):
        return Tensor(self.data, "CTHW")

    def with_data(self, data):
        return replace(self, data=data)


def write_volume(volume, path):
    C, T, H, W = volume.data.shape
    head = struct.pack(
        _HEADER, MAGIC, VERSION, MODALITY_CODES[volume.modality],
        C, T, H, W, volume.orig_width, volume.orig_height, volume.fps,
    )
    Path(path).write_bytes(head + volume.data.astype("<f4", copy=False).tobytes())


def read_volume(path):
    buf = Path(path).read_bytes()
    if len(buf) < HEADER_SIZE:
        raise DataError(f"{path}: truncated header")
    magic, version, code, C, T, H, W, ow, oh, fps = struct.unpack_from(_HEADER, buf)
    if magic != MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    modality = {v: k for k, v in MODALITY_CODES.items()}.get(code)
    if modality is None:
        raise DataError(f"{path}: unknown modality code {code}")
    count = C * T * H * W
    if len(buf) != HEADER_SIZE + 4 * count:
        raise DataError(f"{path}: header declares {count} scalars but payload has {(len(buf) - HEADER_SIZE) / 4:g}")
    data = np.frombuffer(buf, dtype="<f4", offset=HEADER_SIZE).reshape(C, T, H, W)
    return VideoVolume(data.astype(np.float32), modality, float(fps), ow, oh)


# ---------------------------------------------------------------------------
# Manifest


@dataclass(frozen=True)
class Record:
    id: str
    path: str
    label: str
    split: str
    frames: int
    group: str | None = None


@dataclass
class Manifest:
    root: Path
    classes: list
    records: list

    def __post_init__(self):
        self.root = Path(self.root)
        seen = set()
        for r in self.records:
            if r.id in seen:
                raise DataError(f"duplicate video id {r.id!r}")
            seen.add(r.id)
            if r.label not in self.classes:
                raise DataError(f"{r.id}: label {r.label!r} not in class list")
            if r.split not in SPLITS:
                raise DataError(f"{r.id}: unknown split {r.split!r}")
            if not (self.root / r.path).is_file():
                raise DataError(f"{r.id}: missing volume {r.path}")

    def split(self, name):
        return [r for r in self.records if r.split == name]

    def label_index(self, record):
        return self.classes.index(record.label)

    def labels(self):
        return {r.id: r.label for r in self.records}

    def read(self, record):
        return read_volume(self.root / record.path)

    @classmethod
    def load(cls, root, manifest="manifest.tsv", classes="classes.txt"):
        root = Path(root)
        names = [ln.strip() for ln in (root / classes).read_text().splitlines()]
        names = [n for n in names if n and not n.startswith("#")]
        records = []
        for lineno, line in enumerate((root / manifest).read_text().splitlines(), 1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (5, 6):
                raise DataError(f"manifest line {lineno}: expected 5 or 6 fields, got {len(fields)}")
            group = fields[5] if len(fields) == 6 and fields[5] not in ("", "-") else None
            records.append(Record(fields[0], fields[1], fields[2], fields[3], int(fields[4]), group))
        return cls(root, names, records)

    def save(self, manifest="manifest.tsv", classes="classes.txt"):
        self.root.mkdir(parents=True, exist_ok=True)
        (self.root / classes).write_text("".join(f"{c}\n" for c in self.classes))
        lines = ["# id\tpath\tlabel\tsplit\tframes\tgroup"]
        for r in self.records:
            lines.append("\t".join([r.id, r.path, r.label, r.split, str(r.frames), r.group or "-"]))
        (self.root / manifest).write_text("\n".join(lines) + "\n")


def compute_rgb_mean(volumes):
    total = np.zeros(3)
    count = 0
    for v in volumes:
        total += v.data.sum(axis=(1, 2, 3), dtype=np.float64)
        count += v.data[0].size
    return total / count


def write_mean(mean, path):
    Path(path).write_text(" ".join(f"{m:.9g}" for m in mean) + "\n")


def read_mean(path):
    return np.array([float(x) for x in Path(path).read_text().split()])


def subtract_rgb_mean(volume, mean):
    return volume.with_data(volume.data - np.asarray(mean, np.float32)[:, None, None, None])


# ---------------------------------------------------------------------------
# Resizing and flow preprocessing


def _bilinear_matrix(n_out, n_in):
    # Half-pixel-centre sampling, edge-clamped; rows sum to one.
    m = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize(data, width, height):
    """Bilinear spatial resize of a (C, T, H, W) array."""
    if width < 1 or height < 1:
        raise DataError("target size must be positive")
    C, T, H, W = data.shape
    if (H, W) == (height, width):
        return data.copy()
    ry = _bilinear_matrix(height, H)
    rx = _bilinear_matrix(width, W)
    out = ry @ (data.astype(np.float64) @ rx.T)
    return out.astype(np.float32)


def resize_volume(volume, width, height):
    """Resize; for flow the vectors are rescaled to the new pixel grid."""
    data = resize(volume.data, width, height)
    if volume.modality == "flow":
        data[0] *= np.float32(width / volume.width)
        data[1] *= np.float32(height / volume.height)
    return volume.with_data(data)


def subtract_mean_flow(volume):
    mean = volume.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64)
    return volume.with_data((volume.data - mean).astype(np.float32))


def preprocess_flow(volume, width, height):
    """Resize flow to (width, height), rescale magnitudes, remove per-frame mean flow."""
    if volume.modality != "flow":
        raise DataError("preprocess_flow needs a flow volume")
    return subtract_mean_flow(resize_volume(volume, width, height))


# ---------------------------------------------------------------------------
# Augmentation


@dataclass(frozen=True)
class AugmentationConfig:
    width: int
    height: int
    frames: int
    random_clip: bool = True
    multiscale: bool = True
    flip: bool = True

    def __post_init__(self):
        if min(self.width, self.height, self.frames) < 1:
            raise ValueError("network input dims must be positive")


def pad_temporal(volume, frames):
    """Repeat the last frame until the volume has at least ``frames`` frames."""
    if frames < 1:
        raise DataError("target extent must be >= 1")
    if volume.frames >= frames:
        return volume
    tail = np.repeat(volume.data[:, -1:], frames - volume.frames, axis=1)
    return volume.with_data(np.concatenate([volume.data, tail], axis=1))


def crop(volume, x, y, t, width, height, frames):
    return volume.with_data(volume.data[:, t:t + frames, y:y + height, x:x + width])


def clip_origin(shape, width, height, frames, rng):
    """Uniform top-left-front origin (x, y, t) of a crop inside a (T, H, W) extent."""
    T, H, W = shape
    if W < width or H < height:
        raise DataError(f"frame {W}x{H} smaller than crop {width}x{height}")
    if T < frames:
        raise DataError(f"{T} frames < clip extent {frames}; pad first")
    x = int(rng.integers(0, W - width + 1))
    y = int(rng.integers(0, H - height + 1))
    t = int(rng.integers(0, T - frames + 1))
    return x, y, t


def random_clip(volume, cfg, rng):
    x, y, t = clip_origin(volume.data.shape[1:], cfg.width, cfg.height, cfg.frames, rng)
    return crop(volume, x, y, t, cfg.width, cfg.height, cfg.frames)


def _round(v):
    return int(np.floor(v + 0.5))


def multiscale_crop(volume, cfg, rng):
    cw, ch = rng.choice(SCALE_COEFFICIENTS, size=2)
    rw, rh = _round(volume.width * cw), _round(volume.height * ch)
    x, y, t = clip_origin(volume.data.shape[1:], rw, rh, cfg.frames, rng)
    region = crop(volume, x, y, t, rw, rh, cfg.frames)
    return resize_volume(region, cfg.width, cfg.height)


def flip_volume(volume):
    data = volume.data[..., ::-1].copy()
    if volume.modality == "flow":
        data[0] = -data[0]
    return volume.with_data(data)


def horizontal_flip(volume, rng):
    """Mirror the width axis with probability 1/2 (flow-x changes sign)."""
    return flip_volume(volume) if rng.random() < 0.5 else volume


def center_offsets(extent, size):
    return (extent - size) // 2


def augment(volume, cfg, rng):
    """One training clip of exactly (cfg.frames, cfg.height, cfg.width)."""
    volume = pad_temporal(volume, cfg.frames)
    if cfg.multiscale:
        clip = multiscale_crop(volume, cfg, rng)
    elif cfg.random_clip:
        clip = random_clip(volume, cfg, rng)
    else:
        x = center_offsets(volume.width, cfg.width)
        y = center_offsets(volume.height, cfg.height)
        t = center_offsets(volume.frames, cfg.frames)
        clip = crop(volume, x, y, t, cfg.width, cfg.height, cfg.frames)
    if cfg.flip:
        clip = horizontal_flip(clip, rng)
    return clip


def prepare(volume, width=None, height=None, rgb_mean=None):
    """Bring a stored volume to network resolution: flow is rescaled and
    mean-centred per frame; RGB is resized and optionally mean-subtracted."""
    width = width or volume.width
    height = height or volume.height
    if volume.modality == "flow":
        return preprocess_flow(volume, width, height)
    volume = resize_volume(volume, width, height)
    return subtract_rgb_mean(volume, rgb_mean) if rgb_mean is not None else volume


def load_split(manifest, split, rgb_mean=None):
    """[(record, prepared volume, label index)] for one split, in manifest order."""
    out = []
    for r in manifest.split(split):
        out.append((r, prepare(manifest.read(r), rgb_mean=rgb_mean), manifest.label_index(r)))
    if not out:
        raise DataError(f"split {split!r} is empty")
    return out
