"""Canned experiments: parameter-count sweeps and the synthetic ordering run."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .archfile import Arch, load_arch
from .fusion import FusionSpec, Method
from .network import FusionPlacement, Network, ParamReport, TemporalHead, build_two_stream
from .synth import Dataset, Geometry, generate_dataset
from .train import TrainConfig, evaluate, train, train_streams

# (method column, fusion-layer column, fusion method, placement)
TABLE1 = [
    ("Sum", "Softmax", Method.SUM, ""),
    ("Max", "ReLU5", Method.MAX, "relu5"),
    ("Concatenation", "ReLU5", Method.CAT, "relu5"),
    ("Bilinear", "ReLU5", Method.BILINEAR, "relu5"),
    ("Sum", "ReLU5", Method.SUM, "relu5"),
    ("Conv", "ReLU5", Method.CONV, "relu5"),
]

TABLE2 = [
    ("Conv", "ReLU2", Method.CONV, "relu2"),
    ("Conv", "ReLU3", Method.CONV, "relu3"),
    ("Conv", "ReLU4", Method.CONV, "relu4"),
    ("Conv", "ReLU5", Method.CONV, "relu5"),
    ("Conv", "ReLU5 + FC8", Method.CONV, "relu5,fc8"),
    ("Conv", "ReLU3 + ReLU5 + FC6", Method.CONV, "relu3:sum,relu5:conv,fc6:cat"),
]

SWEEPS = {"table1": TABLE1, "table2": TABLE2}


@dataclass
class SweepRow:
    method: str
    layer: str
    report: ParamReport

    def cells(self) -> list[str]:
        extra = f"+{self.report.classifier / 1e6:.2f}M" if self.report.classifier else ""
        return [self.method, self.layer, str(self.report.layers),
                f"{self.report.total / 1e6:.2f}M{extra}"]


def count(spatial: Arch, temporal: Arch, method: Method | str, at: str = "",
          keep_both: bool = False, head: str = "2d") -> ParamReport:
    placement = FusionPlacement.at(at, keep_both) if at else FusionPlacement()
    net = Network(spatial, temporal, FusionSpec(Method(method)), placement, head,
                  materialize=False)
    return net.param_report()


def sweep(name: str, spatial: Arch, temporal: Arch) -> list[SweepRow]:
    rows = SWEEPS[name]
    return [SweepRow(m, layer, count(spatial, temporal, method, at)) for m, layer, method, at in rows]


def format_table(rows: list[SweepRow]) -> str:
    head = ["Fusion Method", "Fusion Layer", "#layers", "#parameters"]
    cells = [head] + [r.cells() for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(head))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "layer", "layers", "params", "classifier"])
    for r in rows:
        w.writerow([r.method, r.layer, r.report.layers, r.report.total, r.report.classifier])
    return buf.getvalue()


# -- synthetic ordering experiment ---------------------------------------------------

HEADS = (TemporalHead.POOL2D, TemporalHead.POOL3D, TemporalHead.CONV3D)


def _desk_config(**kw) -> TrainConfig:
    base = dict(batch_size=16, lr=1e-2, max_epochs=25, patience=4, T=5, L=3,
                tau_range=(1, 3), test_tau=2, test_clips=2, test_flips=True)
    base.update(kw)
    return TrainConfig(**base)


@dataclass
class OrderingConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    data_seed: int = 0
    na: int = 2
    nm: int = 2
    per_class: tuple[int, int, int] = (50, 10, 25)
    geometry: Geometry = field(default_factory=Geometry)
    arch: str = "vgg-tiny"
    fusion_layer: str = "relu3"
    stream_cfg: TrainConfig = field(default_factory=lambda: _desk_config(max_epochs=12, patience=3))
    fused_cfg: TrainConfig = field(default_factory=_desk_config)
    barrier: bool = False


@dataclass
class OrderingResult:
    runs: list[dict]                   # one entry per seed: name -> test accuracy
    layers: dict[str, int]
    params: dict[str, int]
    seeds: tuple[int, ...] = ()

    def median(self, name: str) -> float:
        return float(np.median([r[name] for r in self.runs]))

    @property
    def names(self) -> list[str]:
        return list(self.runs[0]) if self.runs else []

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "seed", "accuracy", "layers", "params"])
        for name in self.names:
            for seed, r in zip(self.seeds, self.runs):
                w.writerow([name, seed, f"{r[name]:.4f}", self.layers[name], self.params[name]])
            w.writerow([name, "median", f"{self.median(name):.4f}", self.layers[name],
                        self.params[name]])
        return buf.getvalue()


def ordering_experiment(cfg: OrderingConfig = OrderingConfig(), dataset: Dataset | None = None,
                        log: Callable[[str], None] | None = None) -> OrderingResult:
    """Single streams, late fusion and conv fusion with each temporal head, per seed.

    Fused networks start from the trained single streams, as late fusion does.
    """
    ds = dataset or generate_dataset(cfg.data_seed, cfg.na, cfg.nm, cfg.per_class, cfg.geometry)
    arch = load_arch(cfg.arch).with_classes(ds.classes)
    spatial = arch
    temporal = arch.with_temporal_channels(2 * cfg.fused_cfg.L)
    runs, layers, params = [], {}, {}
    test = ds.split("test")
    for seed in cfg.seeds:
        scfg = replace(cfg.stream_cfg, seed=seed)
        fcfg = replace(cfg.fused_cfg, seed=seed)
        streams = train_streams(ds, spatial, temporal, scfg)
        acc = {}
        for name, net in streams.items():
            acc[name] = evaluate(net, test, fcfg).accuracy
            rep = net.param_report()
            layers[name], params[name] = rep.layers, rep.total
        late = build_two_stream(spatial, temporal, seed=seed)
        for net in streams.values():
            late.load_from(net)
        acc["late"] = evaluate(late, test, fcfg).accuracy
        rep = late.param_report()
        layers["late"], params["late"] = rep.layers, rep.total
        for head in HEADS:
            net = build_two_stream(spatial, temporal, FusionSpec(Method.CONV),
                                   FusionPlacement.at(cfg.fusion_layer), head, seed=seed,
                                   barrier=cfg.barrier)
            for s in streams.values():
                net.load_from(s)
            train(net, ds, fcfg)
            name = f"conv-{head.value}"
            acc[name] = evaluate(net, test, fcfg).accuracy
            rep = net.param_report()
            layers[name], params[name] = rep.layers, rep.total
        runs.append(acc)
        if log:
            log(f"seed {seed}: " + ", ".join(f"{k}={v:.3f}" for k, v in acc.items()))
    return OrderingResult(runs, layers, params, tuple(cfg.seeds))
