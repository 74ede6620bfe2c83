"""LTC network assembly, shape accounting, checkpoints and 16f extension."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import MODALITY_CHANNELS, MODALITY_CODES
from .numerics import (
    Conv3d,
    Dropout,
    Flatten,
    Linear,
    MaxPool3d,
    ReLU,
    TemporalMaxPool,
    softmax,
    softmax_nll,
    softmax_nll_backward,
)

CONV_CHANNELS = (64, 128, 256, 256, 256)
FC_SIZES = (2048, 2048)
# (kt, kh, kw) per conv stage; the first stage does not pool time.
POOL_PLAN = ((1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2))
MIN_FRAMES = 16

MAGIC = b"LTCN"
VERSION = 1


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkSpec:
    modality: str
    width: int
    height: int
    frames: int
    num_classes: int
    dropout: float = 0.9
    conv_channels: tuple = CONV_CHANNELS
    fc_sizes: tuple = FC_SIZES
    # Set on networks produced by extend_pretrained: conv5 is max-pooled over
    # time before fc6, whose weights come from a net trained on this extent.
    pretrained_frames: int = 0

    def __post_init__(self):
        if self.modality not in MODALITY_CHANNELS:
            raise ValueError(f"modality must be 'flow' or 'rgb', got {self.modality!r}")
        if len(self.conv_channels) != 5 or len(self.fc_sizes) != 2:
            raise ValueError("need five conv stages and two hidden fc layers")
        if min(self.conv_channels) < 1 or min(self.fc_sizes) < 1 or self.num_classes < 2:
            raise ValueError("layer sizes must be positive and num_classes >= 2")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.frames < MIN_FRAMES:
            raise ValueError(f"temporal extent {self.frames} collapses below 1 (minimum {MIN_FRAMES})")
        h, w = self.height, self.width
        for kt, kh, kw in POOL_PLAN:
            h, w = h // kh, w // kw
        if h < 1 or w < 1:
            raise ValueError(f"spatial size {self.width}x{self.height} collapses below 1 before fc6")

    @property
    def input_channels(self):
        return MODALITY_CHANNELS[self.modality]

    @property
    def input_shape(self):
        return (self.input_channels, self.frames, self.height, self.width)


def temporal_profile(spec):
    """Temporal extent after each conv stage (conv + ReLU + pool)."""
    out, t = [], spec.frames
    for kt, _, _ in POOL_PLAN:
        t //= kt
        out.append(t)
    return out


def stage_shapes(spec):
    """(C, T, H, W) entering each conv layer, plus the conv5 stage output."""
    shapes = []
    c, t, h, w = spec.input_shape
    for k, (kt, kh, kw) in zip(spec.conv_channels, POOL_PLAN):
        shapes.append((c, t, h, w))
        c, t, h, w = k, t // kt, h // kh, w // kw
    shapes.append((c, t, h, w))
    return shapes


def conv5_output_shape(spec):
    c, t, h, w = stage_shapes(spec)[-1]
    if spec.pretrained_frames:
        t = 1
    return c, t, h, w


def param_count(spec):
    counts = {}
    cin = spec.input_channels
    for i, k in enumerate(spec.conv_channels, 1):
        counts[f"conv{i}"] = k * cin * 27 + k
        cin = k
    fin = int(np.prod(conv5_output_shape(spec)))
    for name, fout in zip(("fc6", "fc7", "fc8"), (*spec.fc_sizes, spec.num_classes)):
        counts[name] = fout * fin + fout
        fin = fout
    counts["total"] = sum(counts.values())
    return counts


def _uniform(rng, shape, fan_in, gain=1.0):
    b = np.sqrt(gain / fan_in)
    return rng.uniform(-b, b, size=shape).astype(np.float32)


# Layers followed by a ReLU get variance-preserving (He) bounds; the
# classifier starts small so fresh nets predict a near-uniform softmax.
RELU_GAIN = 6.0
CLASSIFIER_GAIN = 1e-2


@dataclass
class Network:
    spec: NetworkSpec
    convs: list
    fcs: list
    seed: int = 0
    training: bool = False
    _stack: list = field(default=None, repr=False)

    def __post_init__(self):
        layers = []
        for conv, kernel in zip(self.convs, POOL_PLAN):
            layers += [conv, ReLU(), MaxPool3d(kernel)]
        if self.spec.pretrained_frames:
            layers.append(TemporalMaxPool())
        layers.append(Flatten())
        fc6, fc7, fc8 = self.fcs
        layers += [fc6, ReLU(), Dropout(self.spec.dropout)]
        layers += [fc7, ReLU(), Dropout(self.spec.dropout)]
        layers.append(fc8)
        self._stack = layers

    def parameters(self):
        """Parameter arrays in checkpoint order (conv1.w, conv1.b, ..., fc8.b)."""
        return [p for layer in (*self.convs, *self.fcs) for p in layer.params()]

    def _check_input(self, x):
        if x.ndim != 5 or x.shape[1:] != self.spec.input_shape:
            raise ValueError(f"expected batch of {self.spec.input_shape} volumes, got {x.shape}")

    def logits(self, x, train=False, rng=None):
        self._check_input(x)
        h = np.asarray(x, dtype=np.float32)
        for layer in self._stack:
            if isinstance(layer, Dropout):
                h = layer.forward(h, cache=train, rng=rng)
            else:
                h = layer.forward(h, cache=train)
        return h

    def forward(self, x, train=False, rng=None):
        """Class probabilities for a (N, C, T, H, W) batch."""
        return softmax(self.logits(x, train=train, rng=rng))

    def features(self, x, stage):
        """Post-ReLU, pre-pool response of conv ``stage`` (1-based)."""
        self._check_input(x)
        h = np.asarray(x, dtype=np.float32)
        for i, layer in enumerate(self._stack[: 3 * stage - 1]):
            h = layer.forward(h)
        return h

    def loss_and_grads(self, x, labels, rng):
        """Train-mode forward + backward; returns (loss, probabilities, grads)."""
        scores = self.logits(x, train=True, rng=rng)
        loss, probs = softmax_nll(scores, labels)
        g = softmax_nll_backward(probs, labels)
        grads = {}
        for layer in reversed(self._stack):
            g, pg = layer.backward(g)
            if pg:
                grads[id(layer)] = pg
        flat = [p for layer in (*self.convs, *self.fcs) for p in grads[id(layer)]]
        return loss, probs, flat


def build(spec, seed=0):
    rng = np.random.default_rng(seed)
    convs = []
    cin = spec.input_channels
    for k in spec.conv_channels:
        fan_in = cin * 27
        convs.append(Conv3d(_uniform(rng, (k, cin, 3, 3, 3), fan_in, RELU_GAIN), np.zeros(k, np.float32)))
        cin = k
    fcs = []
    fin = int(np.prod(conv5_output_shape(spec)))
    for fout, gain in zip((*spec.fc_sizes, spec.num_classes), (RELU_GAIN, RELU_GAIN, CLASSIFIER_GAIN)):
        fcs.append(Linear(_uniform(rng, (fout, fin), fin, gain), np.zeros(fout, np.float32)))
        fin = fout
    return Network(spec, convs, fcs, seed=seed)


def extend_pretrained(net16, frames):
    """Reuse a 16-frame network on ``frames``-frame input.

    The conv stack runs unchanged on the longer clip, its conv5 output
    (temporal extent floor(frames/16)) is max-pooled over time to extent 1,
    and the result feeds the original fc layers.
    """
    spec16 = net16.spec
    if spec16.frames != MIN_FRAMES or spec16.pretrained_frames:
        raise ValueError("extend_pretrained expects a plain 16-frame network")
    if frames < MIN_FRAMES:
        raise ValueError(f"cannot extend to {frames} < {MIN_FRAMES} frames")
    spec = replace(spec16, frames=frames, pretrained_frames=spec16.frames)
    if conv5_output_shape(spec) != conv5_output_shape(spec16):
        raise ValueError("fc6 input size differs; spatial size must match the 16f network")
    convs = [Conv3d(c.weight.copy(), c.bias.copy()) for c in net16.convs]
    fcs = [Linear(f.weight.copy(), f.bias.copy()) for f in net16.fcs]
    return Network(spec, convs, fcs, seed=net16.seed)


# ---------------------------------------------------------------------------
# Checkpoint format: "LTCN", u32 version, spec block, f32 LE parameters.

_SPEC_FMT = "<B5Id7I2IQ"


def _pack_spec(spec, seed):
    return struct.pack(
        _SPEC_FMT,
        MODALITY_CODES[spec.modality],
        spec.width, spec.height, spec.frames, spec.num_classes, spec.pretrained_frames,
        spec.dropout,
        5, *spec.conv_channels, 2,
        *spec.fc_sizes,
        seed,
    )


HEADER_SIZE = 8 + struct.calcsize(_SPEC_FMT)


def save(net, path):
    parts = [MAGIC, struct.pack("<I", VERSION), _pack_spec(net.spec, net.seed)]
    parts += [p.astype("<f4", copy=False).tobytes() for p in net.parameters()]
    Path(path).write_bytes(b"".join(parts))


def load(path):
    buf = Path(path).read_bytes()
    if len(buf) < HEADER_SIZE or buf[:4] != MAGIC:
        raise FormatError(f"{path}: not an LTC network checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    f = struct.unpack_from(_SPEC_FMT, buf, 8)
    modality = {v: k for k, v in MODALITY_CODES.items()}.get(f[0])
    if modality is None:
        raise FormatError(f"{path}: unknown modality code {f[0]}")
    width, height, frames, num_classes, pretrained = f[1:6]
    dropout = f[6]
    if f[7] != 5 or f[13] != 2:
        raise FormatError(f"{path}: unexpected layer plan")
    spec = NetworkSpec(
        modality, width, height, frames, num_classes,
        dropout=dropout,
        conv_channels=tuple(f[8:13]),
        fc_sizes=tuple(f[14:16]),
        pretrained_frames=pretrained,
    )
    net = build(spec, seed=f[16])
    offset = HEADER_SIZE
    params = net.parameters()
    need = 4 * sum(p.size for p in params)
    if len(buf) - offset != need:
        raise FormatError(f"{path}: expected {need} parameter bytes, found {len(buf) - offset}")
    for p in params:
        p[...] = np.frombuffer(buf, dtype="<f4", count=p.size, offset=offset).reshape(p.shape)
        offset += 4 * p.size
    return net
