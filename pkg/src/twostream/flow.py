"""Block-matching optical flow, clipping, 8-bit storage and flow stacking.

Flow fields are (H, W, 2) arrays holding the horizontal (u, along columns)
and vertical (v, along rows) displacement that carries a pixel of frame t
to frame t+1.
"""

from __future__ import annotations

import numpy as np

CLIP = 20.0


def _box_sum(a: np.ndarray, r: int) -> np.ndarray:
    """Sum over the (2r+1)^2 window centred on each pixel of the last two axes, zero outside."""
    lead = [(0, 0)] * (a.ndim - 2)
    p = np.pad(a, lead + [(r + 1, r), (r + 1, r)])
    c = p.cumsum(axis=-2).cumsum(axis=-1)
    k = 2 * r + 1
    return c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]


def _candidates(radius: int) -> np.ndarray:
    """Displacements (dy, dx) by magnitude, then row-major."""
    cand = [(dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return np.array(sorted(cand, key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1])))


def block_matching_flow(frame0: np.ndarray, frame1: np.ndarray, block: int = 5,
                        search_radius: int = 3) -> tuple[np.ndarray, np.ndarray]:
    """Integer flow minimising the mean absolute difference over a block.

    For every pixel the block centred on it in ``frame0`` is compared with the
    block displaced by (dy, dx) in ``frame1``; only pixel pairs inside both
    frames count and the displaced centre must lie inside the image. Ties go
    to the smallest displacement, then to the first in row-major order.
    """
    if frame0.shape != frame1.shape:
        raise ValueError(f"frame shapes differ: {frame0.shape} vs {frame1.shape}")
    if block < 1 or block % 2 == 0:
        raise ValueError(f"block size must be odd and positive, got {block}")
    f0 = np.asarray(frame0, dtype=np.float64)
    f1 = np.asarray(frame1, dtype=np.float64)
    if f0.ndim == 2:
        f0, f1 = f0[..., None], f1[..., None]
    h, w = f0.shape[:2]
    R = search_radius
    cand = _candidates(R)
    # windows[y, x, c, i, j] = padded f1[y + i, x + j], i.e. f1[y + i - R, x + j - R]
    f1p = np.pad(f1, ((R, R), (R, R), (0, 0)))
    okp = np.pad(np.ones((h, w)), R)
    win = np.lib.stride_tricks.sliding_window_view(f1p, (2 * R + 1, 2 * R + 1), axis=(0, 1))
    okw = np.lib.stride_tricks.sliding_window_view(okp, (2 * R + 1, 2 * R + 1))
    iy, ix = cand[:, 0] + R, cand[:, 1] + R
    shifted = np.moveaxis(win[:, :, :, iy, ix], -1, 0)          # (K, h, w, C)
    valid = np.moveaxis(okw[:, :, iy, ix], -1, 0)               # (K, h, w)
    diff = np.abs(f0[None] - shifted).sum(axis=-1) * valid
    r = block // 2
    s = _box_sum(diff, r)
    c = _box_sum(valid, r)
    # the displaced centre is in bounds exactly where it is a valid pair
    cost = np.where(valid > 0, s / np.maximum(c, 1), np.inf)
    # argmin returns the first minimum, i.e. the preferred candidate on ties
    best = np.argmin(cost, axis=0)
    return cand[best, 1].astype(np.float64), cand[best, 0].astype(np.float64)


def clip_flow(flow: np.ndarray, limit: float = CLIP) -> np.ndarray:
    return np.clip(flow, -limit, limit)


def quantize_flow(flow: np.ndarray, limit: float = CLIP) -> np.ndarray:
    """Clip to [-limit, limit] and map linearly onto 0..255."""
    q = np.rint((clip_flow(flow, limit) + limit) * (255.0 / (2 * limit)))
    return q.astype(np.uint8)


def dequantize_flow(q: np.ndarray, limit: float = CLIP) -> np.ndarray:
    return q.astype(np.float64) * (2 * limit / 255.0) - limit


def video_flows(frames: np.ndarray, block: int = 5, search_radius: int = 3) -> np.ndarray:
    """Flow between consecutive frames: (n-1, H, W, 2) with channels (u, v)."""
    out = np.empty((len(frames) - 1,) + frames.shape[1:3] + (2,))
    for k in range(len(frames) - 1):
        u, v = block_matching_flow(frames[k], frames[k + 1], block, search_radius)
        out[k, ..., 0] = u
        out[k, ..., 1] = v
    return out


def build_flow_stack(flows: np.ndarray, t: int, L: int) -> np.ndarray:
    """Stack flows t .. t+L-1 into (H, W, 2L): L horizontal then L vertical, oldest first."""
    if t < 0 or t + L > len(flows):
        raise ValueError(f"flow stack [{t}, {t + L}) outside {len(flows)} flow fields")
    block = flows[t:t + L]
    return np.concatenate([np.moveaxis(block[..., 0], 0, -1),
                           np.moveaxis(block[..., 1], 0, -1)], axis=-1)


def flip_flow_stack(stack: np.ndarray) -> np.ndarray:
    """Mirror a (.., H, W, 2L) stack left-right; horizontal components change sign."""
    L = stack.shape[-1] // 2
    out = stack[..., :, ::-1, :].copy()
    out[..., :L] *= -1.0
    return out
