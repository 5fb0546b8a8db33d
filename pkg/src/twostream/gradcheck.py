"""Central finite-difference checks for every differentiable operation.

Each suite draws several random shapes, reduces the op output to a scalar
with a fixed random weighting, and compares the reverse-mode gradient of
every input with ``(f(x + eps) - f(x - eps)) / (2 eps)``. The error of one
input is ``max|analytic - numeric| / max(max|analytic|, max|numeric|)``.
Inputs to max-pooling, max fusion, ReLU and the hinge are drawn away from
their kinks so a step of ``eps`` never crosses one.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ops
from .fusion import fuse_bilinear, fuse_cat, fuse_conv, fuse_conv3d, fuse_max, fuse_sum
from .temporal import conv3d_fusion_head, pool2d_head, pool3d_head
from .tensor import Tensor

EPS = 1e-5
TOL = 1e-4


@dataclass
class GradResult:
    op: str
    trials: int
    max_rel_error: float
    tol: float = TOL
    shapes: int = 0

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)


def numeric_grad(f: Callable[[], float], x: np.ndarray, eps: float = EPS) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``x``, perturbed in place."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        hi = f()
        flat[i] = old - eps
        lo = f()
        flat[i] = old
        gf[i] = (hi - lo) / (2 * eps)
    return g


def rel_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def check_op(fn: Callable[..., Tensor], inputs: list[np.ndarray], rng: np.random.Generator,
             eps: float = EPS) -> float:
    """Largest relative error over all inputs of ``fn``."""
    tensors = [Tensor(x, requires_grad=True) for x in inputs]
    out = fn(*tensors)
    weight = rng.normal(size=out.shape)
    (out * Tensor(weight)).sum().backward()
    worst = 0.0
    for t, x in zip(tensors, inputs):
        def f():
            return float((fn(*[Tensor(v) for v in inputs]).data * weight).sum())

        num = numeric_grad(f, x, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(x)
        worst = max(worst, rel_error(ana, num))
    return worst


# -- input helpers --------------------------------------------------------------------


def _distinct(rng, shape, spacing=0.05) -> np.ndarray:
    """Values that differ pairwise by at least ``spacing``, in random order."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _away_from_zero(rng, shape, gap=0.05) -> np.ndarray:
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap + x, x)


# -- suites: each returns (fn, inputs) for one random shape ----------------------------


def _conv2d(rng):
    n, h, w, d, dd = rng.integers(1, 3), rng.integers(3, 6), rng.integers(3, 6), rng.integers(1, 4), rng.integers(1, 4)
    k = int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    if min(h, w) + 2 * pad < k:
        k = 1
    x, wt, b = rng.normal(size=(n, h, w, d)), rng.normal(size=(k, k, d, dd)), rng.normal(size=dd)
    return (lambda x, wt, b: ops.conv2d(x, wt, b, stride, pad)), [x, wt, b]


def _conv3d(rng):
    n, d, dd = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
    sp = tuple(int(v) for v in rng.integers(2, 5, size=3))
    k = tuple(int(min(v, rng.integers(1, 4))) for v in sp)
    stride = int(rng.integers(1, 3))
    x, wt, b = rng.normal(size=(n,) + sp + (d,)), rng.normal(size=k + (d, dd)), rng.normal(size=dd)
    return (lambda x, wt, b: ops.conv3d(x, wt, b, stride, 1)), [x, wt, b]


def _pool2d(rng):
    n, h, w, d = rng.integers(1, 3), rng.integers(3, 7), rng.integers(3, 7), rng.integers(1, 3)
    k, s, p = int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = _distinct(rng, (n, h, w, d))
    return (lambda x: ops.maxpool2d(x, k, s, p)), [x]


def _pool3d(rng):
    n, d = rng.integers(1, 3), rng.integers(1, 3)
    sp = tuple(int(v) for v in rng.integers(2, 5, size=3))
    k = tuple(int(rng.integers(1, v + 1)) for v in sp)
    x = _distinct(rng, (n,) + sp + (d,))
    return (lambda x: ops.maxpool3d(x, k, 1)), [x]


def _fc(rng):
    n, f, o = rng.integers(1, 4), rng.integers(1, 7), rng.integers(1, 5)
    return ops.fully_connected, [rng.normal(size=(n, f)), rng.normal(size=(f, o)), rng.normal(size=o)]


def _relu_conv(rng):
    n, h, d, dd = rng.integers(1, 3), rng.integers(3, 5), rng.integers(1, 3), rng.integers(1, 3)
    x = rng.normal(size=(n, h, h, d))
    wt = rng.normal(size=(3, 3, d, dd))

    def fn(x, wt):
        y = ops.conv2d(x, wt, None, 1, 1)
        return ops.relu(y)

    # push pre-activations off zero so eps never crosses the kink
    for _ in range(100):
        pre = ops.conv2d(Tensor(x), Tensor(wt), None, 1, 1).data
        if np.abs(pre).min() > 1e-3:
            break
        x = rng.normal(size=x.shape)
    return fn, [x, wt]


def _relu_fc(rng):
    n, f, o = rng.integers(1, 4), rng.integers(2, 6), rng.integers(2, 5)
    x = rng.normal(size=(n, f))
    wt = rng.normal(size=(f, o))
    for _ in range(100):
        if np.abs(x @ wt).min() > 1e-3:
            break
        x = rng.normal(size=x.shape)
    return (lambda x, wt: ops.relu(ops.fully_connected(x, wt))), [x, wt]


def _pair(rng, nd=3):
    shape = (int(rng.integers(1, 3)),) + tuple(int(v) for v in rng.integers(1, 4, size=nd - 1)) + (int(rng.integers(1, 4)),)
    return rng.normal(size=shape), rng.normal(size=shape)


def _fuse_sum(rng):
    return fuse_sum, list(_pair(rng))


def _fuse_max(rng):
    xa, xb = _pair(rng)
    gap = np.where(np.abs(xa - xb) < 0.05, 0.1, 0.0)
    return fuse_max, [xa + gap, xb]


def _fuse_cat(rng):
    return fuse_cat, list(_pair(rng))


def _fuse_conv(rng):
    xa, xb = _pair(rng)
    d = xa.shape[-1]
    dd = int(rng.integers(1, 4))
    return fuse_conv, [xa, xb, rng.normal(size=(1, 1, 2 * d, dd)), rng.normal(size=dd)]


def _fuse_conv3d(rng):
    xa, xb = _pair(rng, nd=4)
    d = xa.shape[-1]
    return fuse_conv3d, [xa, xb, rng.normal(size=(3, 3, 3, 2 * d, d)), rng.normal(size=d)]


def _fuse_bilinear(rng):
    return fuse_bilinear, list(_pair(rng))


def _pool2d_head(rng):
    n, h, t, d = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    x = _distinct(rng, (n, h, h, t, d))
    return (lambda x: pool2d_head(x, 2, 1)), [x]


def _pool3d_head(rng):
    n, h, t, d = int(rng.integers(1, 3)), int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    x = _distinct(rng, (n, h, h, t, d))
    return (lambda x: pool3d_head(x, (2, 2, t), 1)), [x]


def _conv3d_head(rng):
    n, h, t, d = int(rng.integers(1, 2)), int(rng.integers(2, 4)), int(rng.integers(1, 3)), int(rng.integers(1, 3))
    x = rng.normal(size=(n, h, h, t, d))
    f = rng.normal(size=(3, 3, 3, d, d))
    b = rng.normal(size=d)
    return (lambda x, f, b: conv3d_fusion_head(x, f, b, (2, 2, t), 1)), [x, f, b]


def _cross_entropy(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=n)
    return (lambda s: ops.cross_entropy(s, labels)), [rng.normal(size=(n, c))]


def _hinge(rng):
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 6))
    labels = rng.integers(0, c, size=n)
    for _ in range(100):
        s = rng.normal(size=(n, c))
        m = s - s[np.arange(n), labels][:, None] + 1.0
        m[np.arange(n), labels] = 1.0
        if np.abs(m).min() > 1e-3:
            break
    return (lambda s: ops.multiclass_hinge(s, labels)), [s]


def _softmax(rng):
    n, c = int(rng.integers(1, 4)), int(rng.integers(2, 6))
    return ops.softmax, [rng.normal(size=(n, c))]


def _dropout(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=2))
    seed = int(rng.integers(1 << 30))
    return (lambda x: ops.dropout(x, 0.5, np.random.default_rng(seed), True)), [rng.normal(size=shape)]


def _tensor_arith(rng):
    shape = tuple(int(v) for v in rng.integers(1, 4, size=2))
    a, b = rng.normal(size=shape), rng.uniform(0.5, 2.0, size=shape)
    return (lambda a, b: (a * b - a / b + (b ** 2).log() + a.exp().sqrt())), [a, b]


SUITES: dict[str, Callable] = {
    "tensor": _tensor_arith,
    "conv2d": _conv2d,
    "conv3d": _conv3d,
    "maxpool2d": _pool2d,
    "maxpool3d": _pool3d,
    "fc": _fc,
    "relu-conv": _relu_conv,
    "relu-fc": _relu_fc,
    "fuse-sum": _fuse_sum,
    "fuse-max": _fuse_max,
    "fuse-cat": _fuse_cat,
    "fuse-conv": _fuse_conv,
    "fuse-conv3d": _fuse_conv3d,
    "fuse-bilinear": _fuse_bilinear,
    "pool2d-head": _pool2d_head,
    "pool3d-head": _pool3d_head,
    "conv3d-head": _conv3d_head,
    "cross-entropy": _cross_entropy,
    "hinge": _hinge,
    "softmax": _softmax,
    "dropout": _dropout,
}


def _broken_square(x: Tensor) -> Tensor:
    """x**2 with a deliberately doubled gradient: a negative control."""
    return Tensor._make(x.data ** 2, (x,), "broken_square", lambda g: (4.0 * x.data * g,))


def _negative_control(rng):
    return _broken_square, [rng.normal(size=(int(rng.integers(2, 5)),))]


NEGATIVE_CONTROL = "wrong-gradient"


def run_suite(name: str, trials: int = 5, seed: int = 0, eps: float = EPS,
              tol: float = TOL) -> GradResult:
    builder = _negative_control if name == NEGATIVE_CONTROL else SUITES.get(name)
    if builder is None:
        raise KeyError(f"unknown op {name!r}; choose from {', '.join(SUITES)}")
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    worst, seen = 0.0, set()
    for _ in range(trials):
        # redraw so every trial uses a different input shape where the suite allows it
        for _ in range(50):
            fn, inputs = builder(rng)
            sig = tuple(x.shape for x in inputs)
            if sig not in seen:
                break
        seen.add(sig)
        worst = max(worst, check_op(fn, inputs, rng, eps))
    return GradResult(name, trials, worst, tol, len(seen))


def run_all(names=None, trials: int = 5, seed: int = 0) -> list[GradResult]:
    names = list(SUITES) if names is None else list(names)
    return [run_suite(n, trials, seed) for n in names]
