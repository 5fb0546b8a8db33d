"""Dense tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array and records the operation that produced
it. Calling :meth:`Tensor.backward` on a scalar walks the recorded graph in
reverse topological order and accumulates gradients into every reachable
tensor that has ``requires_grad`` set. Gradients of fan-out nodes are summed.

:func:`stop_gradient` cuts the graph; it is how training halts backprop at an
injected fusion layer.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = ""

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
              backward: Callable[[np.ndarray], Iterable]) -> "Tensor":
        """Create an op output; ``backward(g)`` returns one grad (or None) per parent."""
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        live = any(p.requires_grad for p in parents)
        out.requires_grad = live
        if live:
            out._parents = tuple(parents)

            def _bw(g, _parents=out._parents):
                for p, pg in zip(_parents, backward(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    p._accumulate(pg)

            out._backward = _bw
        else:
            out._parents = ()
            out._backward = None
        return out

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            g = _unbroadcast(g, self.data.shape)
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # -- basic properties -----------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- differentiation -------------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor.

        Without an explicit ``grad`` the tensor must hold a single value.
        """
        if grad is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            return
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ------------------------------------------------------------

    def __add__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other), "add",
                            lambda g: (g, g))

    __radd__ = __add__

    def __sub__(self, other):
        other = as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other), "sub",
                            lambda g: (g, -g))

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __neg__(self):
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), "mul",
                            lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), "div",
                            lambda g: (g / b, -g * a / (b * b)))

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2:
            raise ValueError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
        return Tensor._make(a @ b, (self, other), "matmul",
                            lambda g: (g @ b.T, a.T @ g))

    def __pow__(self, p: float):
        a = self.data
        return Tensor._make(a ** p, (self,), "pow",
                            lambda g: (g * p * a ** (p - 1),))

    def __getitem__(self, idx):
        shape = self.data.shape

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(self.data[idx], (self,), "index", bw)

    # -- shape ops ---------------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.data.shape
        return Tensor._make(self.data.reshape(shape), (self,), "reshape",
                            lambda g: (g.reshape(src),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Tensor._make(self.data.transpose(axes), (self,), "transpose",
                            lambda g: (g.transpose(inv),))

    def flatten(self, start: int = 1) -> "Tensor":
        return self.reshape(self.shape[:start] + (-1,))

    # -- reductions ----------------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims),
                            (self,), "sum", bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.data.size if axis is None else np.prod(
            [self.data.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- elementwise functions ------------------------------------------------------

    def exp(self) -> "Tensor":
        e = np.exp(self.data)
        return Tensor._make(e, (self,), "exp", lambda g: (g * e,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), "log", lambda g: (g / a,))

    def abs(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.abs(a), (self,), "abs", lambda g: (g * np.sign(a),))

    def sqrt(self) -> "Tensor":
        r = np.sqrt(self.data)
        return Tensor._make(r, (self,), "sqrt", lambda g: (g * 0.5 / r,))


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` along broadcast axes."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def stop_gradient(x: Tensor) -> Tensor:
    """Identity in the forward pass; blocks gradient flow to ``x``."""
    return Tensor(x.data)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return np.split(g, bounds, axis=axis)

    return Tensor._make(np.concatenate([t.data for t in tensors], axis=axis),
                        tensors, "concat", bw)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def bw(g):
        return [np.take(g, i, axis=axis) for i in range(len(tensors))]

    return Tensor._make(np.stack([t.data for t in tensors], axis=axis),
                        tensors, "stack", bw)


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data >= b.data
    return Tensor._make(np.where(take_a, a.data, b.data), (a, b), "maximum",
                        lambda g: (g * take_a, g * ~take_a))


def pad(x: Tensor, widths: Sequence[tuple[int, int]]) -> Tensor:
    """Zero padding; ``widths`` has one (before, after) pair per axis."""
    widths = [tuple(w) for w in widths]
    sl = tuple(slice(b, b + n) for (b, _), n in zip(widths, x.shape))
    return Tensor._make(np.pad(x.data, widths), (x,), "pad", lambda g: (g[sl],))


# -- serialization --------------------------------------------------------------

MAGIC = b"TSTN"
_DTYPE_CODES = {
    np.dtype("<f8"): 1,
    np.dtype("<f4"): 2,
    np.dtype("u1"): 3,
    np.dtype("<i8"): 4,
    np.dtype("<i4"): 5,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def tensor_to_bytes(x) -> bytes:
    """Encode an array: magic, dtype code, rank, extents (all u64 LE), row-major data."""
    arr = np.ascontiguousarray(x.data if isinstance(x, Tensor) else x)
    dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder == ">" else arr.dtype
    if dt not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}")
    arr = arr.astype(dt, copy=False)
    header = MAGIC + struct.pack("<QQ", _DTYPE_CODES[dt], arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes(order="C")


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if buf[:4] != MAGIC:
        raise ValueError("not a tensor file (bad magic)")
    code, rank = struct.unpack_from("<QQ", buf, 4)
    if code not in _CODE_DTYPES:
        raise ValueError(f"unknown dtype code {code}")
    shape = struct.unpack_from(f"<{rank}Q", buf, 20)
    offset = 20 + 8 * rank
    dt = _CODE_DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    expected = offset + count * dt.itemsize
    if len(buf) != expected:
        raise ValueError(f"tensor file has {len(buf)} bytes, header implies {expected}")
    return np.frombuffer(buf, dtype=dt, count=count, offset=offset).reshape(shape).copy()


def save_tensor(path, x) -> None:
    Path(path).write_bytes(tensor_to_bytes(x))


def load_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())
