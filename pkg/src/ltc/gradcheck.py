"""Central finite-difference checks for every layer family, in float64."""
from __future__ import annotations

import numpy as np

from . import numerics as nx

STEP = 1e-5
TOLERANCE = 1e-4
FAMILIES = ("conv3d", "maxpool3d", "relu", "dropout", "linear", "softmax_nll")


def numeric_grad(f, arr, h=STEP):
    """d f / d arr by central differences; ``arr`` is perturbed in place and restored."""
    g = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        old = arr[i]
        arr[i] = old + h
        hi = f()
        arr[i] = old - h
        lo = f()
        arr[i] = old
        g[i] = (hi - lo) / (2 * h)
    return g


def rel_error(analytic, numeric, floor=1e-7):
    """max |a - n| / max(|a| + |n|, floor) over all entries."""
    a, n = np.asarray(analytic), np.asarray(numeric)
    return float(np.max(np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), floor)))


def check_conv3d(seed, backward=nx.conv3d_backward):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 5, 5, 5))
    w = rng.standard_normal((2, 3, 3, 3, 3))
    b = rng.standard_normal(2)
    proj = rng.standard_normal((2, 2, 5, 5, 5))

    def f():
        return float(np.sum(nx.conv3d_forward(x, w, b) * proj))

    gx, gw, gb = backward(proj, x, w)
    return max(rel_error(gx, numeric_grad(f, x)),
               rel_error(gw, numeric_grad(f, w)),
               rel_error(gb, numeric_grad(f, b)))


def check_maxpool3d(seed):
    rng = np.random.default_rng(seed)
    kernel = (2, 2, 2) if seed % 2 == 0 else (1, 2, 2)
    # distinct values spaced far beyond the FD step so no window changes winner
    x = rng.permutation(2 * 3 * 5 * 5 * 5).reshape(2, 3, 5, 5, 5) * 1e-2
    out, arg = nx.maxpool3d_forward(x, kernel)
    proj = rng.standard_normal(out.shape)

    def f():
        return float(np.sum(nx.maxpool3d_forward(x, kernel)[0] * proj))

    g = nx.maxpool3d_backward(proj, arg, x.shape, kernel)
    return rel_error(g, numeric_grad(f, x))


def check_relu(seed):
    rng = np.random.default_rng(seed)
    x = rng.choice([-1.0, 1.0], size=(2, 3, 4, 4, 4)) * rng.uniform(0.1, 1.0, (2, 3, 4, 4, 4))
    proj = rng.standard_normal(x.shape)

    def f():
        return float(np.sum(nx.relu(x) * proj))

    return rel_error(nx.relu_backward(proj, x), numeric_grad(f, x))


def check_dropout(seed, p=0.5):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 16))
    proj = rng.standard_normal(x.shape)

    def f():
        out, _ = nx.dropout_forward(x, p, True, np.random.default_rng(seed + 1))
        return float(np.sum(out * proj))

    _, mask = nx.dropout_forward(x, p, True, np.random.default_rng(seed + 1))
    return rel_error(nx.dropout_backward(proj, mask), numeric_grad(f, x))


def check_linear(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 7))
    w = rng.standard_normal((5, 7))
    b = rng.standard_normal(5)
    proj = rng.standard_normal((4, 5))

    def f():
        return float(np.sum(nx.linear_forward(x, w, b) * proj))

    gx, gw, gb = nx.linear_backward(proj, x, w)
    return max(rel_error(gx, numeric_grad(f, x)),
               rel_error(gw, numeric_grad(f, w)),
               rel_error(gb, numeric_grad(f, b)))


def check_softmax_nll(seed):
    rng = np.random.default_rng(seed)
    scores = rng.standard_normal((3, 5)) * 2
    labels = rng.integers(0, 5, size=3)

    def f():
        return nx.softmax_nll(scores, labels)[0]

    _, probs = nx.softmax_nll(scores, labels)
    return rel_error(nx.softmax_nll_backward(probs, labels), numeric_grad(f, scores))


CHECKS = {
    "conv3d": check_conv3d,
    "maxpool3d": check_maxpool3d,
    "relu": check_relu,
    "dropout": check_dropout,
    "linear": check_linear,
    "softmax_nll": check_softmax_nll,
}


def run_gradcheck(seeds=10, conv_backward=None):
    """Max relative error per layer family over ``seeds`` random cases."""
    report = {}
    for name, check in CHECKS.items():
        if name == "conv3d" and conv_backward is not None:
            errs = [check(s, backward=conv_backward) for s in range(seeds)]
        else:
            errs = [check(s) for s in range(seeds)]
        report[name] = max(errs)
    return report
