"""Temporal stacking, 2-D / 3-D pooling heads and 3-D conv fusion.

A temporal stack has shape (H, W, T, D), or (N, H, W, T, D) when batched:
the per-chunk feature maps are stacked along a new axis just before the
channels.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .ops import conv3d, maxpool2d, maxpool3d
from .tensor import Tensor, as_tensor, stack


def stack_time(maps: Sequence) -> Tensor:
    """Stack T maps of shape (H, W, D) (or (N, H, W, D)) into (.., H, W, T, D)."""
    maps = [as_tensor(m) for m in maps]
    if not maps:
        raise ValueError("need at least one feature map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ValueError(f"cannot stack maps of shapes {shape} and {m.shape}")
    return stack(maps, axis=len(shape) - 1)


def unstack_time(x) -> list[Tensor]:
    x = as_tensor(x)
    t_axis = x.ndim - 2
    idx = [slice(None)] * x.ndim
    out = []
    for t in range(x.shape[t_axis]):
        idx[t_axis] = t
        out.append(x[tuple(idx)])
    return out


def pool2d_head(x, window, stride=None, pad=0) -> Tensor:
    """Pool every time slice independently over space; T is unchanged."""
    slices = [maxpool2d(m, window, stride, pad) for m in unstack_time(x)]
    return stack_time(slices)


def pool3d_head(x, cube, stride=None, pad=0) -> Tensor:
    """Max over (H', W', T') cubes of the stack; channels are never mixed."""
    return maxpool3d(x, cube, stride, pad)


def same_padding(kernel: Sequence[int]) -> tuple[int, ...]:
    return tuple(k // 2 for k in kernel)


def conv3d_fusion_head(x, f, b, cube, stride=None, pool_pad=0) -> Tensor:
    """3-D convolution over (H, W, T) with 'same' zero padding, then 3-D pooling.

    The time axis is zero padded so T survives the convolution.
    """
    f = as_tensor(f)
    y = conv3d(x, f, b, pad=same_padding(f.shape[:3]))
    return pool3d_head(y, cube, stride, pool_pad)


@dataclass(frozen=True)
class SamplingPlan:
    """T chunks, ``tau`` frames apart, each reading an L-frame flow stack.

    Chunks start at ``start + k * tau`` for k = 0 .. T-1.
    """

    T: int = 5
    tau: int = 1
    L: int = 10
    start: int = 0

    def __post_init__(self):
        if self.T < 1 or self.tau < 1 or self.L < 1 or self.start < 0:
            raise ValueError(f"invalid sampling plan {self}")

    @property
    def chunk_starts(self) -> list[int]:
        return [self.start + k * self.tau for k in range(self.T)]

    @property
    def span(self) -> int:
        return (self.T - 1) * self.tau + self.L

    @property
    def frames_needed(self) -> int:
        """Frames read from ``start``: L flow fields need L + 1 frames."""
        return self.span + 1

    @property
    def overlapping(self) -> bool:
        return self.T > 1 and self.tau < self.L


@dataclass(frozen=True)
class ReceptiveField:
    total_frames: int
    nominal_frames: int
    overlapping: bool


def receptive_field(plan: SamplingPlan) -> ReceptiveField:
    """Frames covered by the flow stacks, ``(T-1)*tau + L``, next to the nominal T*L."""
    return ReceptiveField(plan.span, plan.T * plan.L, plan.overlapping)
