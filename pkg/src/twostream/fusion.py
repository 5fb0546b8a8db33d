"""Spatial fusion of two feature maps taken at the same time step.

Every function takes maps ``xa`` and ``xb`` of shape (H, W, D), or batched
(N, H, W, D), with identical extents. In the two-stream network ``xa`` is the
receiving (spatial) tower and ``xb`` the tower fused into it (temporal).

Channel layout of concatenation follows the 1-based interleave
``y[2d] = xa[d], y[2d-1] = xb[d]``. In 0-based storage that is::

    y[..., 2*d]     = xb[..., d]
    y[..., 2*d + 1] = xa[..., d]

Conv-fusion filters are stored in that same interleaved layout so they can be
applied to :func:`fuse_cat` output directly; :func:`filter_blocks` gives the
(xa, xb) block view that is easier to read.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .ops import conv2d, conv3d
from .tensor import Tensor, as_tensor, concat, maximum


class Method(str, Enum):
    SUM = "sum"
    MAX = "max"
    CAT = "cat"
    CONV = "conv"
    BILINEAR = "bilinear"


class Init(str, Enum):
    IDENTITY = "identity"
    IDENTITY_SCALED = "identity-scaled"
    GAUSSIAN = "gaussian"
    RANDOM = "random"


@dataclass(frozen=True)
class FusionSpec:
    """How two maps are combined, plus the conv-filter initialisation."""

    method: Method = Method.CONV
    init: Init = Init.IDENTITY
    temporal_scale: float = 3.0
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        object.__setattr__(self, "init", Init(self.init))


def _check_pair(xa: Tensor, xb: Tensor, what: str) -> None:
    if xa.shape != xb.shape:
        raise ValueError(f"{what} fusion needs equal shapes, got {xa.shape} and {xb.shape}")


def fuse_sum(xa, xb) -> Tensor:
    xa, xb = as_tensor(xa), as_tensor(xb)
    _check_pair(xa, xb, "sum")
    return xa + xb


def fuse_max(xa, xb) -> Tensor:
    """Elementwise max. On ties the whole gradient goes to ``xa``."""
    xa, xb = as_tensor(xa), as_tensor(xb)
    _check_pair(xa, xb, "max")
    return maximum(xa, xb)


def fuse_cat(xa, xb) -> Tensor:
    """Interleaved channel stacking; output has 2D channels."""
    xa, xb = as_tensor(xa), as_tensor(xb)
    _check_pair(xa, xb, "cat")
    y = concat([xb.reshape(xb.shape + (1,)), xa.reshape(xa.shape + (1,))], axis=-1)
    return y.reshape(xa.shape[:-1] + (2 * xa.shape[-1],))


def split_cat(y) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`fuse_cat` on arrays: returns (xa, xb)."""
    y = y.data if isinstance(y, Tensor) else np.asarray(y)
    return y[..., 1::2], y[..., 0::2]


def fuse_conv(xa, xb, f, b) -> Tensor:
    """Concatenate then apply a 1x1 filter bank ``f`` of shape (1, 1, 2D, D)."""
    xa, xb, f, b = as_tensor(xa), as_tensor(xb), as_tensor(f), as_tensor(b)
    _check_pair(xa, xb, "conv")
    d = xa.shape[-1]
    if f.shape[:2] != (1, 1) or f.shape[2] != 2 * d or f.ndim != 4:
        raise ValueError(f"conv fusion filter must be (1, 1, {2 * d}, D'), got {f.shape}")
    return conv2d(fuse_cat(xa, xb), f, b)


def fuse_conv3d(xa, xb, f, b, pad=1) -> Tensor:
    """Stack-and-convolve for temporal stacks (H, W, T, D) with a 3-D filter bank."""
    xa, xb, f, b = as_tensor(xa), as_tensor(xb), as_tensor(f), as_tensor(b)
    _check_pair(xa, xb, "3d conv")
    return conv3d(fuse_cat(xa, xb), f, b, pad=pad)


def fuse_bilinear(xa, xb) -> Tensor:
    """Sum over locations of the outer product of channel vectors.

    Returns a D*D vector (or (N, D*D) for batched input) with index
    ``p * D + q`` holding ``sum_ij xa[i, j, p] * xb[i, j, q]``.
    """
    xa, xb = as_tensor(xa), as_tensor(xb)
    if xa.shape[-1] != xb.shape[-1]:
        raise ValueError(f"bilinear fusion needs equal channel counts, got {xa.shape} and {xb.shape}")
    _check_pair(xa, xb, "bilinear")
    single = xa.ndim == 3
    n = 1 if single else xa.shape[0]
    d = xa.shape[-1]
    a = xa.data.reshape(n, -1, d)
    bb = xb.data.reshape(n, -1, d)
    y = np.einsum("nlp,nlq->npq", a, bb)

    def bw(g):
        g = g.reshape(n, d, d)
        ga = np.einsum("npq,nlq->nlp", g, bb).reshape(xa.shape)
        gb = np.einsum("npq,nlp->nlq", g, a).reshape(xb.shape)
        return ga, gb

    out_shape = (d * d,) if single else (n, d * d)
    return Tensor._make(y.reshape(out_shape), (xa, xb), "bilinear", bw)


def power_l2_normalize(y: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Signed square root followed by unit L2 norm along the last axis."""
    z = np.sign(y) * np.sqrt(np.abs(y))
    return z / np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), eps)


def fuse(method: Method | str, xa, xb, f=None, b=None) -> Tensor:
    method = Method(method)
    if method is Method.SUM:
        return fuse_sum(xa, xb)
    if method is Method.MAX:
        return fuse_max(xa, xb)
    if method is Method.CAT:
        return fuse_cat(xa, xb)
    if method is Method.CONV:
        return fuse_conv(xa, xb, f, b)
    return fuse_bilinear(xa, xb)


# -- conv-fusion filter initialisation ---------------------------------------------


def blocks_to_filter(block_a: np.ndarray, block_b: np.ndarray) -> np.ndarray:
    """Interleave (..., D, D') blocks for xa and xb into a (..., 2D, D') filter."""
    if block_a.shape != block_b.shape:
        raise ValueError(f"block shapes differ: {block_a.shape} vs {block_b.shape}")
    d = block_a.shape[-2]
    f = np.empty(block_a.shape[:-2] + (2 * d, block_a.shape[-1]), dtype=np.float64)
    f[..., 0::2, :] = block_b
    f[..., 1::2, :] = block_a
    return f


def filter_blocks(f) -> tuple[np.ndarray, np.ndarray]:
    """Split an interleaved filter into its (xa, xb) input-channel blocks."""
    f = f.data if isinstance(f, Tensor) else np.asarray(f)
    return f[..., 1::2, :], f[..., 0::2, :]


def init_fusion_filter(mode: Init | str, d: int, scale_temporal: float = 3.0,
                       sigma: float = 1.0, rng: np.random.Generator | None = None,
                       d_out: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Filter (1, 1, 2D, D') and zero bias for 1x1 conv fusion.

    ``identity`` sums the two maps; ``identity-scaled`` multiplies the xb
    (temporal) identity by ``scale_temporal``; ``gaussian`` draws zero-mean
    entries with std ``sigma``; ``random`` uses a fan-in scaled uniform.
    """
    mode = Init(mode)
    d_out = d if d_out is None else d_out
    if mode in (Init.IDENTITY, Init.IDENTITY_SCALED):
        eye = np.eye(d, d_out)
        tb = eye * (scale_temporal if mode is Init.IDENTITY_SCALED else 1.0)
        f = blocks_to_filter(eye, tb)
    else:
        rng = rng if rng is not None else np.random.default_rng()
        if mode is Init.GAUSSIAN:
            f = rng.normal(0.0, sigma, size=(2 * d, d_out))
        else:
            lim = np.sqrt(3.0 / (2 * d))
            f = rng.uniform(-lim, lim, size=(2 * d, d_out))
    return f.reshape(1, 1, 2 * d, d_out), np.zeros(d_out)


def gaussian_window(size=(3, 3, 3), sigma: float = 1.0) -> np.ndarray:
    """Separable Gaussian of the given extents, normalised to sum to one."""
    axes = [np.exp(-0.5 * ((np.arange(n) - (n - 1) / 2) / sigma) ** 2) for n in size]
    g = axes[0]
    for a in axes[1:]:
        g = np.multiply.outer(g, a)
    return g / g.sum()


def init_fusion_filter3d(mode: Init | str, d: int, kernel=(3, 3, 3),
                         scale_temporal: float = 3.0, sigma: float = 1.0,
                         rng: np.random.Generator | None = None,
                         d_out: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Filter (kH, kW, kT, 2D, D') for 3-D conv fusion.

    Identity modes weight the stacked identities by a normalised Gaussian
    window of std ``sigma`` over the spatiotemporal extent, so a constant
    input is still summed exactly.
    """
    mode = Init(mode)
    d_out = d if d_out is None else d_out
    if mode in (Init.IDENTITY, Init.IDENTITY_SCALED):
        f2, b = init_fusion_filter(mode, d, scale_temporal, d_out=d_out)
        win = gaussian_window(kernel, sigma)
        return win[..., None, None] * f2[0, 0], b
    rng = rng if rng is not None else np.random.default_rng()
    shape = tuple(kernel) + (2 * d, d_out)
    if mode is Init.GAUSSIAN:
        return rng.normal(0.0, sigma, size=shape), np.zeros(d_out)
    lim = np.sqrt(3.0 / (2 * d * int(np.prod(kernel))))
    return rng.uniform(-lim, lim, size=shape), np.zeros(d_out)
