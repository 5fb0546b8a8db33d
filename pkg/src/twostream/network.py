"""Two-stream network construction, execution and parameter accounting.

A network is assembled from two tower architectures (spatial RGB, temporal
flow), a :class:`~twostream.fusion.FusionSpec` and a :class:`FusionPlacement`.
Fusion always feeds one tower *into* the other (temporal into spatial by
default). A placement lists one or more fusion points:

* a point at a conv-stage layer fuses feature maps,
* a point at an intermediate fc layer fuses vectors,
* a point at the last fc / softmax layer averages class predictions; as the
  only point with conv fusion it learns a linear map of the two score vectors.

With a single map or vector point and ``keep_both_towers`` off, the feeding
tower is cut after the fusion point. Several points, or a prediction point,
keep both towers and produce one loss per tower.

Layer counts cover weighted layers only (conv, fc, conv fusion).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ops
from .archfile import Arch, LayerSpec
from .fusion import (FusionSpec, Init, Method, fuse_bilinear, fuse_cat,
                     fuse_conv, fuse_conv3d, fuse_max, fuse_sum,
                     init_fusion_filter, init_fusion_filter3d)
from .tensor import Tensor, pad, stop_gradient

SPATIAL, TEMPORAL = "spatial", "temporal"


class TemporalHead(str, Enum):
    POOL2D = "2d"
    POOL3D = "3d-pool"
    CONV3D = "3d-conv-pool"


class Direction(str, Enum):
    INTO_SPATIAL = "temporal-into-spatial"
    INTO_TEMPORAL = "spatial-into-temporal"


@dataclass(frozen=True)
class FusionPoint:
    """Where to fuse: layer of the receiving tower, layer of the feeding tower."""

    layer: str
    other_layer: str
    method: Method | None = None

    @property
    def label(self) -> str:
        name = self.layer if self.layer == self.other_layer else f"{self.layer}/{self.other_layer}"
        return name if self.method is None else f"{name}:{self.method.value}"


def parse_points(text: str) -> tuple[FusionPoint, ...]:
    """Parse ``relu3:sum,relu5:conv,fc6:cat`` or ``relu5_3/relu5``."""
    points = []
    for part in (p.strip() for p in text.replace("+", ",").split(",")):
        if not part:
            continue
        method = None
        if ":" in part:
            part, m = part.split(":", 1)
            method = Method(m.strip())
        a, _, b = part.partition("/")
        points.append(FusionPoint(a.strip(), (b or a).strip(), method))
    return tuple(points)


@dataclass(frozen=True)
class FusionPlacement:
    points: tuple[FusionPoint, ...] = ()
    keep_both_towers: bool = False
    direction: Direction = Direction.INTO_SPATIAL

    @classmethod
    def at(cls, text: str, keep_both_towers: bool = False,
           direction: Direction | str = Direction.INTO_SPATIAL) -> "FusionPlacement":
        return cls(parse_points(text), keep_both_towers, Direction(direction))

    @property
    def label(self) -> str:
        s = "+".join(p.label for p in self.points) or "none"
        return s + (" (both towers)" if self.keep_both_towers and len(self.points) == 1 else "")


# -- shape walking --------------------------------------------------------------------


def layer_output_shape(spec: LayerSpec, shape: tuple[int, ...]) -> tuple[int, ...]:
    if spec.kind == "conv":
        if len(shape) != 3:
            raise ValueError(f"conv layer {spec.name} needs a map, got shape {shape}")
        cs = ops.ConvSpec((spec.kernel, spec.kernel), shape[2], spec.filters,
                          (spec.stride,) * 2, (spec.pad, spec.pad))
        return cs.output_shape(shape[:2])
    if spec.kind == "pool":
        if len(shape) != 3:
            raise ValueError(f"pool layer {spec.name} needs a map, got shape {shape}")
        out = [ops.out_extent(n, spec.kernel, spec.stride, *spec.pad) for n in shape[:2]]
        if min(out) < 1 or min(n + sum(spec.pad) for n in shape[:2]) < spec.kernel:
            raise ValueError(f"pool layer {spec.name}: window {spec.kernel} larger than input {shape}")
        return (out[0], out[1], shape[2])
    if spec.kind == "fc":
        return (spec.units,)
    return shape


def layer_param_shapes(spec: LayerSpec, in_shape: tuple[int, ...]) -> dict[str, tuple[int, ...]]:
    if spec.kind == "conv":
        return {"weight": (spec.kernel, spec.kernel, in_shape[-1], spec.filters),
                "bias": (spec.filters,)}
    if spec.kind == "fc":
        return {"weight": (int(np.prod(in_shape)), spec.units), "bias": (spec.units,)}
    return {}


@dataclass
class LayerPlan:
    spec: LayerSpec
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    params: dict[str, tuple[int, ...]]


@dataclass
class FusionNode:
    point: FusionPoint
    method: Method
    kind: str                      # "map" | "vector" | "scores" | "prediction"
    index: int                     # layer index in the receiving tower
    other_index: int               # layer index in the feeding tower
    in_shape: tuple[int, ...]
    other_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    pad_self: tuple[int, int] = (0, 0)
    pad_other: tuple[int, int] = (0, 0)
    params: dict[str, tuple[int, ...]] = field(default_factory=dict)
    conv3d: bool = False

    @property
    def name(self) -> str:
        return self.point.layer

    @property
    def weighted(self) -> bool:
        return self.method is Method.CONV and self.kind != "prediction"


@dataclass
class TowerPlan:
    stream: str
    arch: Arch
    in_channels: int
    layers: list[LayerPlan]
    head_pool: int | None          # index of the pool where the temporal head acts

    @property
    def complete(self) -> bool:
        return len(self.layers) == len(self.arch.layers)


@dataclass
class ParamRow:
    stream: str
    layer: str
    params: int


@dataclass
class ParamReport:
    rows: list[ParamRow]
    total: int
    layers: int
    classifier: int = 0
    label: str = ""

    @property
    def millions(self) -> float:
        return self.total / 1e6

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "name", "params"])
        for r in self.rows:
            w.writerow([r.stream, r.layer, r.params])
        w.writerow(["total", "", self.total])
        if self.classifier:
            w.writerow(["classifier", "separate", self.classifier])
        return buf.getvalue()

    def summary(self) -> str:
        extra = f"+{self.classifier / 1e6:.2f}M classifier" if self.classifier else ""
        return f"{self.layers:>3d} layers  {self.total / 1e6:8.2f}M{extra}"


def _head_pool_index(layers: list[LayerSpec]) -> int | None:
    last = None
    for i, spec in enumerate(layers):
        if spec.kind == "fc":
            break
        if spec.kind == "pool":
            last = i
    return last


def _prediction_start(arch: Arch) -> int:
    """Index of the last fc layer; points at or after it fuse predictions."""
    idx = [i for i, s in enumerate(arch.layers) if s.kind == "fc"]
    if not idx:
        raise ValueError(f"{arch.name} has no fc layer")
    return idx[-1]


def _align(a: tuple[int, ...], b: tuple[int, ...], where: str):
    """Zero-pad amounts (rows/cols at bottom/right) to make two maps equal in size."""
    if len(a) != len(b):
        raise ValueError(f"cannot fuse {where}: shapes {a} and {b} differ in rank")
    if len(a) == 1:
        if a != b:
            raise ValueError(f"cannot fuse {where}: vector sizes {a[0]} and {b[0]} differ")
        return (0, 0), (0, 0)
    dh, dw = a[0] - b[0], a[1] - b[1]
    if abs(dh) > 1 or abs(dw) > 1:
        raise ValueError(
            f"cannot fuse {where}: spatial sizes {a[:2]} and {b[:2]} differ by more "
            f"than one row/column")
    return (max(-dh, 0), max(-dw, 0)), (max(dh, 0), max(dw, 0))


def _padded(shape, p):
    return (shape[0] + p[0], shape[1] + p[1]) + tuple(shape[2:]) if len(shape) == 3 else shape


# -- the network ------------------------------------------------------------------------


class Network:
    """Executable two-stream (or single-stream) network.

    Inputs to :meth:`forward` are ``rgb`` of shape (N, T, H, W, 3) and ``flow``
    of shape (N, T, H, W, 2L). T is the number of temporal chunks.
    """

    def __init__(self, spatial: Arch | None, temporal: Arch | None,
                 fusion: FusionSpec | None = None,
                 placement: FusionPlacement | None = None,
                 temporal_head: TemporalHead | str = TemporalHead.POOL2D,
                 seed: int = 0, dropout: tuple[float, ...] | None = None,
                 barrier: bool = True, materialize: bool = True):
        self.fusion = fusion or FusionSpec()
        self.placement = placement or FusionPlacement()
        self.temporal_head = TemporalHead(temporal_head)
        self.dropout = dropout
        self.seed = seed
        self.use_barrier = barrier
        if spatial is None and temporal is None:
            raise ValueError("need at least one tower")
        if self.placement.points and (spatial is None or temporal is None):
            raise ValueError("fusion needs both towers")
        self.archs = {SPATIAL: spatial, TEMPORAL: temporal}
        into_spatial = self.placement.direction is Direction.INTO_SPATIAL
        self.receiver = SPATIAL if into_spatial else TEMPORAL
        self.feeder = TEMPORAL if into_spatial else SPATIAL
        if spatial is not None and temporal is not None and spatial.classes != temporal.classes:
            raise ValueError(f"towers disagree on class count: {spatial.classes} vs {temporal.classes}")
        self.classes = (spatial or temporal).classes
        self._plan()
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        if materialize:
            self.init_params(seed)

    # -- planning ------------------------------------------------------------------------

    def _plan(self) -> None:
        archs = self.archs
        points = self.placement.points
        self.nodes: list[FusionNode] = []
        self.towers: dict[str, TowerPlan] = {}
        if not points:
            for stream, arch in archs.items():
                if arch is not None:
                    self.towers[stream] = self._walk(stream, arch, len(arch.layers))
            self.prediction_fusion = Method.SUM
            self.barrier: dict[str, int] = {}
            self.keep_both = True
            return

        recv, feed = archs[self.receiver], archs[self.feeder]
        resolved = []
        for p in points:
            try:
                i, j = recv.index(p.layer), feed.index(p.other_layer)
            except KeyError as exc:
                raise ValueError(f"unknown fusion layer: {exc.args[0]}") from None
            method = p.method or self.fusion.method
            at_scores = i >= _prediction_start(recv) or recv.layers[i].kind == "softmax"
            if at_scores and method is Method.CONV and len(points) == 1:
                kind = "scores"    # learned combination of the two class-score vectors
            elif at_scores:
                kind = "prediction"
            elif any(s.kind == "fc" for s in recv.layers[:i + 1]):
                kind = "vector"
            else:
                kind = "map"
            if kind in ("scores", "prediction") and j < _prediction_start(feed):
                raise ValueError(f"fusion point {p.label} pairs a prediction layer with a hidden layer")
            if kind in ("vector", "map") and j >= _prediction_start(feed):
                raise ValueError(f"fusion point {p.label} pairs a hidden layer with a prediction layer")
            resolved.append((i, j, p, kind))
        resolved.sort(key=lambda r: r[0])
        if [r[1] for r in resolved] != sorted(r[1] for r in resolved):
            raise ValueError("fusion points must be in the same order in both towers")
        hidden = [r for r in resolved if r[3] != "prediction"]
        pred = [r for r in resolved if r[3] == "prediction"]
        if len(pred) > 1:
            raise ValueError("at most one prediction-layer fusion point")
        self.prediction_fusion = Method.SUM
        if pred:
            m = pred[0][2].method or Method.SUM
            if m not in (Method.SUM, Method.MAX):
                raise ValueError(f"prediction-layer fusion supports sum or max, not {m.value}")
            self.prediction_fusion = m
        keep_both = self.placement.keep_both_towers or len(resolved) > 1 or bool(pred)
        if any((r[2].method or self.fusion.method) is Method.BILINEAR for r in hidden):
            if len(resolved) > 1:
                raise ValueError("bilinear fusion cannot be combined with other fusion points")
            keep_both = False
        self.keep_both = keep_both

        feed_len = len(feed.layers) if keep_both else (hidden[-1][1] + 1 if hidden else len(feed.layers))
        feed_plan = self._walk(self.feeder, feed, feed_len)
        self.towers[self.feeder] = feed_plan

        # receiving tower with fusion nodes spliced in
        hp = _head_pool_index(recv.layers)
        shape = (recv.input_size, recv.input_size, self._in_channels(self.receiver, recv))
        layers: list[LayerPlan] = []
        node_at = {r[0]: r for r in hidden}
        last_map = max((r[0] for r in hidden if r[3] == "map"), default=None)
        for i, spec in enumerate(recv.layers):
            out = layer_output_shape(spec, shape)
            layers.append(LayerPlan(spec, shape, out, layer_param_shapes(spec, shape)))
            shape = out
            if i in node_at:
                _, j, p, kind = node_at[i]
                method = p.method or self.fusion.method
                other = feed_plan.layers[j].out_shape
                pad_self, pad_other = _align(shape, other, p.label)
                fused_in = _padded(shape, pad_self)
                if method is Method.CAT:
                    out = fused_in[:-1] + (2 * fused_in[-1],)
                elif method is Method.BILINEAR:
                    if kind != "map":
                        raise ValueError("bilinear fusion is only defined on feature maps")
                    out = (fused_in[-1] ** 2,)
                else:
                    out = fused_in
                node = FusionNode(p, method, kind, i, j, shape, other, out, pad_self, pad_other)
                if method is Method.CONV:
                    d = fused_in[-1]
                    use3d = kind == "map" and i == last_map and self.temporal_head is TemporalHead.CONV3D
                    node.conv3d = use3d
                    k = (3, 3, 3) if use3d else ((1, 1) if kind == "map" else ())
                    node.params = {"weight": tuple(k) + (2 * d, d), "bias": (d,)}
                elif method is Method.BILINEAR:
                    node.params = {"classifier.weight": (out[0], recv.classes),
                                   "classifier.bias": (recv.classes,)}
                if self.temporal_head is TemporalHead.CONV3D and i == last_map and method is not Method.CONV:
                    raise ValueError("the 3-D conv head needs conv fusion at the last map fusion point")
                self.nodes.append(node)
                shape = out
                if method is Method.BILINEAR:
                    break
        if self.temporal_head is TemporalHead.CONV3D and last_map is None:
            raise ValueError("the 3-D conv head needs a conv fusion point at a conv-stage layer")
        if last_map is not None and hp is not None and last_map > hp:
            if self.temporal_head is not TemporalHead.POOL2D:
                raise ValueError("3-D heads need the map fusion point before the last pooling layer")
        self.towers[self.receiver] = TowerPlan(self.receiver, recv,
                                               self._in_channels(self.receiver, recv), layers, hp)
        first = hidden[0] if hidden else None
        self.barrier = {self.receiver: first[0], self.feeder: first[1]} if first else {}

    def _in_channels(self, stream: str, arch: Arch) -> int:
        return arch.spatial_channels if stream == SPATIAL else arch.temporal_channels

    def _walk(self, stream: str, arch: Arch, upto: int) -> TowerPlan:
        shape = (arch.input_size, arch.input_size, self._in_channels(stream, arch))
        layers = []
        for spec in arch.layers[:upto]:
            out = layer_output_shape(spec, shape)
            layers.append(LayerPlan(spec, shape, out, layer_param_shapes(spec, shape)))
            shape = out
        return TowerPlan(stream, arch, self._in_channels(stream, arch), layers,
                         _head_pool_index(arch.layers))

    # -- parameters ----------------------------------------------------------------------

    def init_params(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        self.params = {}
        for stream in (SPATIAL, TEMPORAL):
            plan = self.towers.get(stream)
            if plan is None:
                continue
            for lp in plan.layers:
                if not lp.params:
                    continue
                wshape = lp.params["weight"]
                fan_in = int(np.prod(wshape[:-1]))
                w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=wshape)
                self.params[f"{stream}.{lp.spec.name}.weight"] = Tensor(w, requires_grad=True)
                self.params[f"{stream}.{lp.spec.name}.bias"] = Tensor(
                    np.zeros(lp.params["bias"]), requires_grad=True)
        for node in self.nodes:
            key = f"fusion.{node.name}"
            if node.method is Method.CONV:
                shp = node.params["weight"]
                d = shp[-1]
                spec = self.fusion
                if node.conv3d:
                    f, b = init_fusion_filter3d(spec.init, d, shp[:3], spec.temporal_scale,
                                                spec.sigma, rng)
                elif node.kind == "map":
                    f, b = init_fusion_filter(spec.init, d, spec.temporal_scale, spec.sigma, rng)
                else:
                    f, b = init_fusion_filter(spec.init, d, spec.temporal_scale, spec.sigma, rng)
                    f = f[0, 0]
                self.params[f"{key}.weight"] = Tensor(f, requires_grad=True)
                self.params[f"{key}.bias"] = Tensor(b, requires_grad=True)
            elif node.method is Method.BILINEAR:
                wshape = node.params["classifier.weight"]
                self.params[f"{key}.classifier.weight"] = Tensor(
                    rng.normal(0.0, 0.01, size=wshape), requires_grad=True)
                self.params[f"{key}.classifier.bias"] = Tensor(
                    np.zeros(wshape[1]), requires_grad=True)
        self.frozen = set()
        if self.use_barrier:
            for stream, idx in self.barrier.items():
                for lp in self.towers[stream].layers[:idx + 1]:
                    for k in lp.params:
                        self.frozen.add(f"{stream}.{lp.spec.name}.{k}")

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def load_from(self, other: "Network", streams=(SPATIAL, TEMPORAL)) -> list[str]:
        """Copy same-named, same-shaped parameters of ``other``; returns copied names."""
        copied = []
        for name, t in other.params.items():
            if name.split(".", 1)[0] not in streams:
                continue
            mine = self.params.get(name)
            if mine is not None and mine.shape == t.shape:
                mine.data = t.data.copy()
                copied.append(name)
        return copied

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, v in state.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"state entry {k} {v.shape} does not fit this network")
            self.params[k].data = np.array(v, dtype=np.float64)

    # -- introspection -------------------------------------------------------------------

    def head_name(self, stream: str) -> str:
        return "fused" if self.nodes and stream == self.receiver else stream

    @property
    def heads(self) -> list[str]:
        out = []
        for s in (self.receiver, self.feeder):
            if s not in self.towers:
                continue
            if s == self.feeder and self.nodes and not (self.keep_both and self.towers[s].complete):
                continue
            out.append(self.head_name(s))
        return out

    @property
    def head_losses(self) -> dict[str, str]:
        hinge = any(n.method is Method.BILINEAR for n in self.nodes)
        return {h: ("hinge" if h == "fused" and hinge else "ce") for h in self.heads}

    def param_report(self) -> ParamReport:
        rows: list[ParamRow] = []
        nlayers = 0
        classifier = 0
        for stream in (SPATIAL, TEMPORAL):
            plan = self.towers.get(stream)
            if plan is None:
                continue
            for i, lp in enumerate(plan.layers):
                if lp.params:
                    n = sum(int(np.prod(s)) for s in lp.params.values())
                    rows.append(ParamRow(stream, lp.spec.name, n))
                    nlayers += 1
                if stream == self.receiver:
                    for node in self.nodes:
                        if node.index == i and node.params:
                            n = sum(int(np.prod(s)) for s in node.params.values())
                            if node.method is Method.BILINEAR:
                                classifier += n
                            else:
                                rows.append(ParamRow("fusion", node.name, n))
                                nlayers += 1
        return ParamReport(rows, sum(r.params for r in rows), nlayers, classifier,
                           label=self.placement.label)

    def layer_shapes(self) -> list[tuple[str, str, tuple[int, ...]]]:
        rows = []
        for stream in (SPATIAL, TEMPORAL):
            plan = self.towers.get(stream)
            if plan is None:
                continue
            rows.append((stream, "input", (plan.arch.input_size, plan.arch.input_size,
                                           plan.in_channels)))
            for i, lp in enumerate(plan.layers):
                rows.append((stream, lp.spec.name, lp.out_shape))
                for node in self.nodes:
                    if stream == self.receiver and node.index == i:
                        rows.append(("fusion", node.name, node.out_shape))
        return rows

    # -- execution -----------------------------------------------------------------------

    def _dropout_rate(self, spec: LayerSpec, k: int) -> float:
        if self.dropout is None:
            return spec.rate
        return self.dropout[k] if k < len(self.dropout) else self.dropout[-1]

    def _apply(self, stream: str, lp: LayerPlan, x: Tensor, training: bool,
               rng, drop_k: int) -> Tensor:
        spec = lp.spec
        p = self.params
        if spec.kind == "conv":
            return ops.conv2d(x, p[f"{stream}.{spec.name}.weight"], p[f"{stream}.{spec.name}.bias"],
                              spec.stride, (spec.pad, spec.pad))
        if spec.kind == "pool":
            return ops.maxpool2d(x, spec.kernel, spec.stride, (spec.pad, spec.pad))
        if spec.kind == "fc":
            return ops.fully_connected(x, p[f"{stream}.{spec.name}.weight"],
                                       p[f"{stream}.{spec.name}.bias"])
        if spec.kind == "relu":
            return ops.relu(x)
        if spec.kind == "dropout":
            return ops.dropout(x, self._dropout_rate(spec, drop_k), rng, training)
        return x  # lrn, softmax: logits are returned

    def _pool3d(self, spec: LayerSpec, x: Tensor, n: int, t: int) -> Tensor:
        """Pool (N*T, H, W, D) over a (k, k, T) cube into (N, H', W', D)."""
        h, w, d = x.shape[1:]
        s = x.reshape(n, t, h, w, d).transpose(0, 2, 3, 1, 4)
        y = ops.maxpool3d(s, (spec.kernel, spec.kernel, t), (spec.stride, spec.stride, t),
                          (spec.pad, spec.pad, (0, 0)))
        return y.reshape(n, y.shape[1], y.shape[2], d)

    def _run(self, stream: str, x: Tensor, n: int, t: int, training: bool, rng,
             feed_acts: dict[int, Tensor] | None = None, record: set[int] | None = None):
        plan = self.towers[stream]
        timed = True
        acts: dict[int, Tensor] = {}
        drop_k = 0
        barrier = self.barrier.get(stream) if self.use_barrier else None
        nodes = {nd.index: nd for nd in self.nodes} if stream == self.receiver else {}
        for i, lp in enumerate(plan.layers):
            if (lp.spec.kind == "pool" and i == plan.head_pool and timed
                    and self.temporal_head is not TemporalHead.POOL2D):
                x = self._pool3d(lp.spec, x, n, t)
                timed = False
            else:
                x = self._apply(stream, lp, x, training, rng, drop_k)
            if lp.spec.kind == "dropout":
                drop_k += 1
            if barrier is not None and i == barrier:
                x = stop_gradient(x)
            if record is not None and i in record:
                acts[i] = x
            if i in nodes:
                node = nodes[i]
                other = feed_acts[node.other_index]
                x = self._fuse(node, x, other, n, t, timed)
                if node.method is Method.BILINEAR:
                    break
        if timed and x.ndim == 2:
            x = x.reshape(n, t, x.shape[-1]).mean(axis=1)
        return x, acts

    def _fuse(self, node: FusionNode, xa: Tensor, xb: Tensor, n: int, t: int,
              timed: bool) -> Tensor:
        if xa.ndim == 4 and (any(node.pad_self) or any(node.pad_other)):
            if any(node.pad_self):
                xa = pad(xa, ((0, 0), (0, node.pad_self[0]), (0, node.pad_self[1]), (0, 0)))
            if any(node.pad_other):
                xb = pad(xb, ((0, 0), (0, node.pad_other[0]), (0, node.pad_other[1]), (0, 0)))
        key = f"fusion.{node.name}"
        m = node.method
        if m is Method.SUM:
            return fuse_sum(xa, xb)
        if m is Method.MAX:
            return fuse_max(xa, xb)
        if m is Method.CAT:
            return fuse_cat(xa, xb)
        if m is Method.CONV:
            f, b = self.params[f"{key}.weight"], self.params[f"{key}.bias"]
            if node.kind in ("vector", "scores"):
                return ops.fully_connected(fuse_cat(xa, xb), f, b)
            if node.conv3d:
                h, w, d = xa.shape[1:]

                def to_stack(z):
                    return z.reshape(n, t, h, w, d).transpose(0, 2, 3, 1, 4)

                y = fuse_conv3d(to_stack(xa), to_stack(xb), f, b, pad=1)
                return y.transpose(0, 3, 1, 2, 4).reshape(n * t, h, w, y.shape[-1])
            return fuse_conv(xa, xb, f, b)
        # bilinear: pooled outer product, signed sqrt + L2, linear classifier
        y = fuse_bilinear(xa, xb)
        z = _signed_sqrt_l2(y)
        return ops.fully_connected(z, self.params[f"{key}.classifier.weight"],
                                   self.params[f"{key}.classifier.bias"])

    def forward(self, rgb, flow, training: bool = False,
                rng: np.random.Generator | None = None) -> dict[str, Tensor]:
        """Class scores per head, averaged over temporal chunks where not pooled."""
        inputs = {SPATIAL: rgb, TEMPORAL: flow}
        for k, v in inputs.items():
            if k in self.towers:
                v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
                if v.ndim == 4:
                    v = v[:, None]
                inputs[k] = v
        shapes = {k: inputs[k].shape for k in self.towers}
        n, t = next(iter(shapes.values()))[:2]
        for k, s in shapes.items():
            plan = self.towers[k]
            want = (plan.arch.input_size, plan.arch.input_size, plan.in_channels)
            if s[2:] != want or s[:2] != (n, t):
                raise ValueError(f"{k} input has shape {s}, network expects (N, T) + {want}")

        def flat(v):
            return Tensor(v.reshape((n * t,) + v.shape[2:]))

        if not self.nodes:
            return {stream: self._run(stream, flat(inputs[stream]), n, t, training, rng)[0]
                    for stream in (self.receiver, self.feeder) if stream in self.towers}
        record = {nd.other_index for nd in self.nodes}
        fb, acts = self._run(self.feeder, flat(inputs[self.feeder]), n, t, training, rng,
                             record=record)
        fa, _ = self._run(self.receiver, flat(inputs[self.receiver]), n, t, training, rng,
                          feed_acts=acts)
        out = {"fused": fa}
        if self.keep_both and self.towers[self.feeder].complete:
            out[self.feeder] = fb
        return out

    def predict(self, rgb, flow, pre_softmax: bool = False) -> np.ndarray:
        """Class probabilities (or scores) averaged (or maxed) over heads."""
        scores = self.forward(rgb, flow, training=False)
        per_head = [s.data if pre_softmax else ops.softmax(s).data for s in scores.values()]
        if self.prediction_fusion is Method.MAX:
            return np.max(per_head, axis=0)
        return np.mean(per_head, axis=0)


def _signed_sqrt_l2(y: Tensor, eps: float = 1e-12) -> Tensor:
    sign = np.sign(y.data)
    z = (y.abs() + eps).sqrt() * sign
    norm = ((z * z).sum(axis=-1, keepdims=True) + eps).sqrt()
    return z / norm


def build_two_stream(spatial: Arch, temporal: Arch, fusion: FusionSpec | None = None,
                     placement: FusionPlacement | None = None,
                     temporal_head: TemporalHead | str = TemporalHead.POOL2D,
                     seed: int = 0, **kw) -> Network:
    return Network(spatial, temporal, fusion, placement, temporal_head, seed=seed, **kw)


def build_single_stream(arch: Arch, stream: str = SPATIAL, seed: int = 0, **kw) -> Network:
    if stream == SPATIAL:
        return Network(arch, None, seed=seed, **kw)
    return Network(None, arch, seed=seed, **kw)


def count_params(net: Network) -> ParamReport:
    return net.param_report()


def layer_output_shapes(net: Network) -> list[tuple[str, str, tuple[int, ...]]]:
    return net.layer_shapes()


def tower_shapes(arch: Arch, input_size: int | None = None,
                 channels: int | None = None) -> list[tuple[str, tuple[int, ...]]]:
    size = input_size or arch.input_size
    shape = (size, size, channels or arch.spatial_channels)
    rows = [("input", shape)]
    for spec in arch.layers:
        shape = layer_output_shape(spec, shape)
        rows.append((spec.name, shape))
    return rows
