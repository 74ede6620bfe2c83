"""Dense tensors and differentiable layer primitives.

Activations are numpy arrays laid out (N, C, T, H, W): batch, channel, time,
height, width, row-major.  Every layer keeps whatever it needs for the
backward pass on ``self`` and exposes ``forward``/``backward`` plus the
functional ``*_forward``/``*_backward`` pairs used by the gradient checker.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

AXIS_ROLES = "NCTHW"


class ShapeError(ValueError):
    pass


@dataclass
class Tensor:
    """An ndarray tagged with one role letter per axis (e.g. ``"CTHW"``)."""

    data: np.ndarray
    axes: str

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data)
        if self.data.dtype not in (np.float32, np.float64):
            raise TypeError(f"unsupported dtype {self.data.dtype}")
        if len(self.axes) != self.data.ndim:
            raise ShapeError(f"axes {self.axes!r} do not match ndim {self.data.ndim}")
        if any(a not in AXIS_ROLES for a in self.axes) or len(set(self.axes)) != len(self.axes):
            raise ShapeError(f"bad axis roles {self.axes!r}")
        if any(n < 1 for n in self.data.shape):
            raise ShapeError(f"all extents must be >= 1, got {self.data.shape}")

    @property
    def shape(self):
        return self.data.shape

    @property
    def double(self):
        return self.data.dtype == np.float64

    def pack(self) -> bytes:
        """Serialize as: u8 ndim, ndim role bytes, u8 precision, u32 extents, LE data."""
        dt = "<f8" if self.double else "<f4"
        head = struct.pack("<B", self.data.ndim) + self.axes.encode("ascii")
        head += struct.pack("<B", 8 if self.double else 4)
        head += struct.pack(f"<{self.data.ndim}I", *self.data.shape)
        return head + self.data.astype(dt, copy=False).tobytes()

    @classmethod
    def unpack(cls, buf: bytes, offset: int = 0) -> tuple["Tensor", int]:
        (ndim,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        axes = buf[offset:offset + ndim].decode("ascii")
        offset += ndim
        (width,) = struct.unpack_from("<B", buf, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, offset)
        offset += 4 * ndim
        count = int(np.prod(shape))
        nbytes = width * count
        if len(buf) - offset < nbytes:
            raise ShapeError("truncated tensor buffer")
        dt = "<f8" if width == 8 else "<f4"
        data = np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape)
        native = np.float64 if width == 8 else np.float32
        return cls(data.astype(native), axes), offset + nbytes


# ---------------------------------------------------------------------------
# 3x3x3 convolution, stride 1, zero padding 1


def _im2col(xp, T, H, W):
    # xp: (C, T+2, H+2, W+2) -> (C*27, T*H*W)
    win = sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    C = xp.shape[0]
    return win.transpose(0, 4, 5, 6, 1, 2, 3).reshape(C * 27, T * H * W)


def _col2im(cols, C, T, H, W):
    cols = cols.reshape(C, 3, 3, 3, T, H, W)
    gp = np.zeros((C, T + 2, H + 2, W + 2), dtype=cols.dtype)
    for dt in range(3):
        for dh in range(3):
            for dw in range(3):
                gp[:, dt:dt + T, dh:dh + H, dw:dw + W] += cols[:, dt, dh, dw]
    return gp[:, 1:-1, 1:-1, 1:-1]


def conv3d_forward(x, weight, bias):
    """Same-padded 3x3x3 convolution of a (N, C, T, H, W) batch."""
    if x.ndim != 5:
        raise ShapeError(f"expected (N, C, T, H, W) input, got shape {x.shape}")
    if any(n < 1 for n in x.shape):
        raise ShapeError(f"all extents must be >= 1, got {x.shape}")
    K, C = weight.shape[:2]
    if weight.shape[2:] != (3, 3, 3):
        raise ShapeError("kernel must be 3x3x3")
    if x.shape[1] != C:
        raise ShapeError(f"input has {x.shape[1]} channels, layer expects {C}")
    N, _, T, H, W = x.shape
    w2 = weight.reshape(K, C * 27)
    out = np.empty((N, K, T, H, W), dtype=np.result_type(x, weight))
    for n in range(N):
        xp = np.pad(x[n], ((0, 0), (1, 1), (1, 1), (1, 1)))
        cols = _im2col(xp, T, H, W)
        out[n] = (w2 @ cols).reshape(K, T, H, W)
    out += bias.reshape(1, K, 1, 1, 1)
    return out


def conv3d_backward(grad_out, x, weight):
    """Return (grad_input, grad_weight, grad_bias) for ``conv3d_forward``."""
    N, C, T, H, W = x.shape
    K = weight.shape[0]
    if grad_out.shape != (N, K, T, H, W):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(N, K, T, H, W)}")
    w2 = weight.reshape(K, C * 27)
    gx = np.empty_like(x)
    gw = np.zeros((K, C * 27), dtype=weight.dtype)
    for n in range(N):
        g = grad_out[n].reshape(K, T * H * W)
        xp = np.pad(x[n], ((0, 0), (1, 1), (1, 1), (1, 1)))
        gw += g @ _im2col(xp, T, H, W).T
        gx[n] = _col2im(w2.T @ g, C, T, H, W)
    gb = grad_out.sum(axis=(0, 2, 3, 4))
    return gx, gw.reshape(weight.shape), gb


# ---------------------------------------------------------------------------
# Max pooling with stride equal to the kernel, floor semantics


def _pool_view(x, kernel):
    N, C, T, H, W = x.shape
    kt, kh, kw = kernel
    To, Ho, Wo = T // kt, H // kh, W // kw
    v = x[:, :, :To * kt, :Ho * kh, :Wo * kw]
    v = v.reshape(N, C, To, kt, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 6, 3, 5, 7)
    return v.reshape(N, C, To, Ho, Wo, kt * kh * kw)


def maxpool3d_forward(x, kernel):
    """Max-pool a (N, C, T, H, W) batch; ``kernel`` is (kt, kh, kw).

    Returns ``(output, argmax)`` where ``argmax`` holds, per output cell, the
    offset of the winner inside its window (row-major over kt, kh, kw).  Ties go
    to the lowest offset, which is also the lowest flat input index.
    """
    kernel = tuple(int(k) for k in kernel)
    if x.ndim != 5 or any(e < k for e, k in zip(x.shape[2:], kernel)):
        raise ShapeError(f"input {x.shape} smaller than pooling kernel {kernel}")
    win = _pool_view(x, kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, arg


def maxpool3d_backward(grad_out, argmax, input_shape, kernel):
    kernel = tuple(int(k) for k in kernel)
    N, C, T, H, W = input_shape
    kt, kh, kw = kernel
    To, Ho, Wo = T // kt, H // kh, W // kw
    if grad_out.shape != (N, C, To, Ho, Wo) or argmax.shape != grad_out.shape:
        raise ShapeError("argmax cache does not match grad_out / input shape")
    win = np.zeros((N, C, To, Ho, Wo, kt * kh * kw), dtype=grad_out.dtype)
    np.put_along_axis(win, argmax[..., None], grad_out[..., None], axis=-1)
    win = win.reshape(N, C, To, Ho, Wo, kt, kh, kw).transpose(0, 1, 2, 5, 3, 6, 4, 7)
    gx = np.zeros(input_shape, dtype=grad_out.dtype)
    gx[:, :, :To * kt, :Ho * kh, :Wo * kw] = win.reshape(N, C, To * kt, Ho * kh, Wo * kw)
    return gx


# ---------------------------------------------------------------------------
# Pointwise layers, dense layer, loss


def relu(x):
    return np.maximum(x, 0)


def relu_backward(grad_out, x):
    return grad_out * (x > 0)


def dropout_forward(x, p, train, rng=None):
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is the identity."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    keep = rng.random(x.shape) >= p
    mask = keep.astype(x.dtype) / x.dtype.type(1 - p)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def linear_forward(x, weight, bias):
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input {x.shape} does not match in_features {weight.shape[1]}")
    return x @ weight.T + bias


def linear_backward(grad_out, x, weight):
    return grad_out @ weight, grad_out.T @ x, grad_out.sum(axis=0)


def softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_nll(scores, labels):
    """Mean negative log-likelihood over the batch; returns (loss, probabilities)."""
    scores = np.atleast_2d(scores)
    labels = np.atleast_1d(np.asarray(labels))
    K = scores.shape[1]
    if labels.shape[0] != scores.shape[0]:
        raise ShapeError("one label per score row required")
    if np.any(labels < 0) or np.any(labels >= K):
        raise ValueError(f"label out of range for {K} classes")
    z = scores - scores.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    logp = z[np.arange(len(labels)), labels] - logz
    probs = np.exp(z - logz[:, None])
    return float(-logp.mean()), probs


def softmax_nll_backward(probs, labels):
    labels = np.atleast_1d(np.asarray(labels))
    g = probs.copy()
    g[np.arange(len(labels)), labels] -= 1
    return g / len(labels)


# ---------------------------------------------------------------------------
# Stateful layer objects


@dataclass
class Conv3d:
    weight: np.ndarray
    bias: np.ndarray
    _x: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 5 or self.weight.shape[2:] != (3, 3, 3):
            raise ShapeError(f"conv weight must be (K, C, 3, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("bias length must equal out_channels")

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        return conv3d_forward(x, self.weight, self.bias)

    def backward(self, grad_out):
        if self._x is None:
            raise RuntimeError("backward called without a cached forward")
        gx, gw, gb = conv3d_backward(grad_out, self._x, self.weight)
        self._x = None
        return gx, (gw, gb)

    def params(self):
        return [self.weight, self.bias]


@dataclass
class MaxPool3d:
    kernel: tuple  # (kt, kh, kw)
    _arg: np.ndarray | None = field(default=None, repr=False)
    _shape: tuple | None = field(default=None, repr=False)

    def forward(self, x, cache=False):
        out, arg = maxpool3d_forward(x, self.kernel)
        if cache:
            self._arg, self._shape = arg, x.shape
        return out

    def backward(self, grad_out):
        g = maxpool3d_backward(grad_out, self._arg, self._shape, self.kernel)
        self._arg = self._shape = None
        return g, ()

    def out_shape(self, t, h, w):
        kt, kh, kw = self.kernel
        return t // kt, h // kh, w // kw


class TemporalMaxPool:
    """Global max over the time axis, collapsing it to extent 1."""

    def __init__(self):
        self._arg = self._shape = None

    def forward(self, x, cache=False):
        T = x.shape[2]
        out, arg = maxpool3d_forward(x, (T, 1, 1))
        if cache:
            self._arg, self._shape = arg, x.shape
        return out

    def backward(self, grad_out):
        g = maxpool3d_backward(grad_out, self._arg, self._shape, (self._shape[2], 1, 1))
        self._arg = self._shape = None
        return g, ()


class ReLU:
    def __init__(self):
        self._x = None

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        return relu(x)

    def backward(self, grad_out):
        g = relu_backward(grad_out, self._x)
        self._x = None
        return g, ()


class Dropout:
    def __init__(self, p):
        if not 0 <= p < 1:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self._mask = None

    def forward(self, x, cache=False, rng=None):
        out, mask = dropout_forward(x, self.p, train=cache, rng=rng)
        self._mask = mask
        return out

    def backward(self, grad_out):
        return dropout_backward(grad_out, self._mask), ()


class Flatten:
    def __init__(self):
        self._shape = None

    def forward(self, x, cache=False):
        if cache:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out):
        return grad_out.reshape(self._shape), ()


@dataclass
class Linear:
    weight: np.ndarray
    bias: np.ndarray
    _x: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError("linear weight must be (out, in) with bias of length out")

    def forward(self, x, cache=False):
        if cache:
            self._x = x
        return linear_forward(x, self.weight, self.bias)

    def backward(self, grad_out):
        gx, gw, gb = linear_backward(grad_out, self._x, self.weight)
        self._x = None
        return gx, (gw, gb)

    def params(self):
        return [self.weight, self.bias]
