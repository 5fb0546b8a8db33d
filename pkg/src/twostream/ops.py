"""Differentiable network kernels on channel-last tensors.

"Convolution" here is cross-correlation (no kernel flip), as in every ConvNet
toolbox. Layouts:

* 2-D maps are ``(H, W, D)`` or batched ``(N, H, W, D)``
* 3-D maps are ``(H, W, T, D)`` or batched ``(N, H, W, T, D)``
* conv weights are ``(kH, kW[, kT], D, D')``, biases ``(D',)``

Padding is explicit zero padding. Pooling pads with ``-inf`` so padded cells
never win. Max-pool backward routes the gradient to the first maximum in
row-major window order.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor


def _tuple(v, n: int, what: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"{what} needs {n} entries, got {v}")
    return v


def _pad_pairs(pad, n: int) -> tuple[tuple[int, int], ...]:
    """Accept an int, one int per axis, or one (before, after) pair per axis."""
    if isinstance(pad, (int, np.integer)):
        return ((int(pad), int(pad)),) * n
    pad = list(pad)
    if len(pad) != n:
        raise ValueError(f"padding needs {n} entries, got {pad}")
    out = []
    for p in pad:
        if isinstance(p, (int, np.integer)):
            out.append((int(p), int(p)))
        else:
            b, a = p
            out.append((int(b), int(a)))
    return tuple(out)


def out_extent(n: int, k: int, stride: int, pad_before: int, pad_after: int) -> int:
    return (n + pad_before + pad_after - k) // stride + 1


@dataclass(frozen=True)
class ConvSpec:
    kernel: tuple[int, ...]
    in_channels: int
    out_channels: int
    stride: tuple[int, ...] = ()
    pad: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        n = len(self.kernel)
        object.__setattr__(self, "kernel", _tuple(self.kernel, n, "kernel"))
        object.__setattr__(self, "stride", _tuple(self.stride or 1, n, "stride"))
        object.__setattr__(self, "pad", _pad_pairs(self.pad or 0, n))
        if min(self.kernel) < 1 or min(self.stride) < 1:
            raise ValueError(f"kernel and stride extents must be >= 1: {self}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError(f"channel counts must be >= 1: {self}")

    @property
    def weight_shape(self) -> tuple[int, ...]:
        return self.kernel + (self.in_channels, self.out_channels)

    @property
    def num_params(self) -> int:
        return int(np.prod(self.weight_shape)) + self.out_channels

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        out = []
        for n, k, s, (pb, pa) in zip(spatial, self.kernel, self.stride, self.pad):
            o = out_extent(n, k, s, pb, pa)
            if o < 1:
                raise ValueError(
                    f"kernel {self.kernel} does not fit input {tuple(spatial)} "
                    f"with padding {self.pad}")
            out.append(o)
        return tuple(out) + (self.out_channels,)


def _windows(xp: np.ndarray, kernel, stride) -> np.ndarray:
    """(N, *spatial, D) -> (N, *out, D, *kernel) strided view."""
    nsp = len(kernel)
    axes = tuple(range(1, 1 + nsp))
    win = sliding_window_view(xp, kernel, axis=axes)
    sl = (slice(None),) + tuple(slice(None, None, s) for s in stride)
    return win[sl]


def _convnd(x: Tensor, w: Tensor, b: Tensor | None, stride, pad) -> Tensor:
    nsp = w.ndim - 2
    kernel = w.shape[:nsp]
    xd = x.data
    if xd.ndim != nsp + 2:
        raise ValueError(f"expected a batched {nsp}-D map, got input shape {xd.shape}")
    if xd.shape[-1] != w.shape[-2]:
        raise ValueError(
            f"input shape {xd.shape} has {xd.shape[-1]} channels but weights "
            f"{w.shape} expect {w.shape[-2]}")
    if b is not None and b.shape != (w.shape[-1],):
        raise ValueError(f"bias shape {b.shape} does not match weights {w.shape}")
    stride = _tuple(stride, nsp, "stride")
    pads = _pad_pairs(pad, nsp)
    for n, k, (pb, pa) in zip(xd.shape[1:-1], kernel, pads):
        if n + pb + pa < k:
            raise ValueError(f"kernel {kernel} larger than padded input {xd.shape}")
    widths = ((0, 0),) + pads + ((0, 0),)
    xp = np.pad(xd, widths)
    win = _windows(xp, kernel, stride)  # (N, *out, D, *k)
    # weights (k..., D, D') -> (D, k..., D') to line up with window axes
    wt = np.moveaxis(w.data, nsp, 0)
    red = nsp + 1
    y = np.tensordot(win, wt, axes=(list(range(win.ndim - red, win.ndim)),
                                    list(range(red))))
    if b is not None:
        y = y + b.data
    out_sp = y.shape[1:-1]

    def bw(g):
        gw = None
        if w.requires_grad:
            gw = np.tensordot(win, g, axes=([0] + list(range(1, 1 + nsp)),
                                            [0] + list(range(1, 1 + nsp))))
            # (D, *k, D') -> (*k, D, D')
            gw = np.moveaxis(gw, 0, nsp)
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b is not None else None
        gx = None
        if x.requires_grad:
            # cols: (N, *out, *k, D)
            cols = np.tensordot(g, w.data, axes=([g.ndim - 1], [w.ndim - 1]))
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for off in np.ndindex(*kernel):
                sl = (slice(None),) + tuple(
                    slice(o, o + s * (n - 1) + 1, s)
                    for o, s, n in zip(off, stride, out_sp)) + (slice(None),)
                gxp[sl] += cols[(slice(None),) * (1 + nsp) + off]
            crop = (slice(None),) + tuple(
                slice(pb, pb + n) for (pb, _), n in zip(pads, xd.shape[1:-1])
            ) + (slice(None),)
            gx = gxp[crop]
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Tensor._make(y, parents, f"conv{nsp}d", bw)


def _unbatch(y: Tensor) -> Tensor:
    return y.reshape(y.shape[1:])


def conv2d(x, weights, bias=None, stride=1, pad=0) -> Tensor:
    """2-D cross-correlation. ``x`` is (H, W, D) or (N, H, W, D)."""
    x, w = as_tensor(x), as_tensor(weights)
    b = as_tensor(bias) if bias is not None else None
    if w.ndim != 4:
        raise ValueError(f"conv2d weights must be (kH, kW, D, D'), got {w.shape}")
    if x.ndim == 3:
        return _unbatch(_convnd(x.reshape((1,) + x.shape), w, b, stride, pad))
    return _convnd(x, w, b, stride, pad)


def conv3d(x, weights, bias=None, stride=1, pad=0) -> Tensor:
    """3-D cross-correlation over (H, W, T). ``x`` is (H, W, T, D) or batched."""
    x, w = as_tensor(x), as_tensor(weights)
    b = as_tensor(bias) if bias is not None else None
    if w.ndim != 5:
        raise ValueError(f"conv3d weights must be (kH, kW, kT, D, D'), got {w.shape}")
    if x.ndim == 4:
        return _unbatch(_convnd(x.reshape((1,) + x.shape), w, b, stride, pad))
    return _convnd(x, w, b, stride, pad)


def conv(x, spec: ConvSpec, weights, bias=None) -> Tensor:
    """Convolution driven by a :class:`ConvSpec` (2-D or 3-D by kernel rank)."""
    w = as_tensor(weights)
    if w.shape != spec.weight_shape:
        raise ValueError(f"weights {w.shape} do not match spec {spec.weight_shape}")
    fn = conv2d if len(spec.kernel) == 2 else conv3d
    return fn(x, w, bias, spec.stride, spec.pad)


def _poolnd(x: Tensor, window, stride, pad) -> Tensor:
    nsp = x.ndim - 2
    window = _tuple(window, nsp, "window")
    stride = _tuple(stride if stride is not None else window, nsp, "stride")
    pads = _pad_pairs(pad, nsp)
    xd = x.data
    for n, k, (pb, pa) in zip(xd.shape[1:-1], window, pads):
        if n + pb + pa < k:
            raise ValueError(f"pool window {window} larger than padded input {xd.shape}")
    widths = ((0, 0),) + pads + ((0, 0),)
    xp = np.pad(xd, widths, constant_values=-np.inf) if any(
        p for pr in pads for p in pr) else xd
    win = _windows(xp, window, stride)  # (N, *out, D, *k)
    flat = win.reshape(win.shape[:nsp + 2] + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        # absolute padded coordinates of each argmax
        offs = np.unravel_index(arg, window)
        grids = np.indices(arg.shape, sparse=True)
        idx = [grids[0]]
        for a in range(nsp):
            idx.append(grids[1 + a] * stride[a] + offs[a])
        idx.append(grids[nsp + 1])
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        np.add.at(gxp, tuple(idx), g)
        crop = (slice(None),) + tuple(
            slice(pb, pb + n) for (pb, _), n in zip(pads, xd.shape[1:-1])
        ) + (slice(None),)
        return (gxp[crop],)

    return Tensor._make(np.ascontiguousarray(y), (x,), f"maxpool{nsp}d", bw)


def maxpool2d(x, window, stride=None, pad=0) -> Tensor:
    """Max pooling over (H, W); never across channels."""
    x = as_tensor(x)
    if x.ndim == 3:
        return _unbatch(_poolnd(x.reshape((1,) + x.shape), window, stride, pad))
    return _poolnd(x, window, stride, pad)


def maxpool3d(x, window, stride=None, pad=0) -> Tensor:
    """Max pooling over an (H, W, T) cube; never across channels."""
    x = as_tensor(x)
    if x.ndim == 4:
        return _unbatch(_poolnd(x.reshape((1,) + x.shape), window, stride, pad))
    return _poolnd(x, window, stride, pad)


def fully_connected(x, weights, bias=None) -> Tensor:
    """``x @ W + b``. ``x`` is (F,) or (N, F); trailing axes are flattened."""
    x, w = as_tensor(x), as_tensor(weights)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    elif x.ndim > 2:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input shape {x.shape} incompatible with weights {w.shape}")
    y = x @ w
    if bias is not None:
        y = y + as_tensor(bias)
    return y.reshape(-1) if single else y


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return Tensor._make(np.where(mask, x.data, 0.0), (x,), "relu",
                        lambda g: (g * mask,))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)
    return Tensor._make(out, (x,), "log_softmax",
                        lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    z = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)
    return Tensor._make(p, (x,), "softmax",
                        lambda g: (p * (g - (g * p).sum(axis=axis, keepdims=True)),))


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    lp = log_softmax(logits.reshape(-1, logits.shape[-1]))
    if len(labels) != lp.shape[0]:
        raise ValueError(f"{len(labels)} labels for {lp.shape[0]} predictions")
    picked = lp[np.arange(len(labels)), labels]
    return -picked.mean()


def multiclass_hinge(scores, labels, margin: float = 1.0) -> Tensor:
    """Multiclass hinge: mean over samples of sum_{j != y} (s_j + m - s_y)_+."""
    scores = as_tensor(scores)
    labels = np.asarray(labels, dtype=np.int64)
    n = len(labels)
    correct = scores[np.arange(n), labels].reshape(n, 1)
    m = np.full(scores.shape, margin)
    m[np.arange(n), labels] = 0.0
    viol = relu(scores - correct + m)
    return viol.sum(axis=1).mean()


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or at rate 0."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return Tensor._make(x.data * keep, (x,), "dropout", lambda g: (g * keep,))
