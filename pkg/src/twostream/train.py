"""SGD training with plateau learning-rate drops, and clip-averaged evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ops
from .archfile import Arch
from .fusion import FusionSpec, Method
from .network import (SPATIAL, TEMPORAL, FusionPlacement, Network, TemporalHead,
                      build_single_stream, build_two_stream)
from .synth import ClipSample, Dataset, SynthVideo, sample_test_clips, sample_training_clip
from .tensor import Tensor, load_tensor, save_tensor


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 0.0
    lr_drop: float = 10.0
    patience: int = 2
    min_delta: float = 0.001
    max_drops: int = 2
    max_epochs: int = 30
    seed: int = 0
    T: int = 5
    tau_range: tuple[int, int] = (1, 10)
    L: int = 10
    test_tau: int | None = None
    test_clips: int = 1
    test_flips: bool = False
    pre_softmax: bool = False
    dropout: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.lr_drop <= 1.0:
            raise ValueError("lr_drop must be > 1 so the learning rate decreases")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")
        self.tau_range = tuple(int(t) for t in self.tau_range)

    @property
    def eval_tau(self) -> int:
        return self.test_tau if self.test_tau is not None else self.tau_range[0]


class SGD:
    """Momentum SGD: v <- mu*v - lr*(g + wd*w); w <- w + v."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        for k in sorted(self.params):
            p = self.params[k]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * g
            p.data = p.data + v

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class PlateauSchedule:
    """Divide the learning rate once every time validation stops improving.

    An epoch improves when accuracy beats the best so far by at least
    ``min_delta``; ``patience`` non-improving epochs in a row trigger a drop
    and restart the count.
    """

    def __init__(self, lr: float, factor: float = 10.0, patience: int = 2,
                 min_delta: float = 0.001):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = -math.inf
        self.stale = 0
        self.drops = 0

    def step(self, val_acc: float) -> bool:
        if val_acc >= self.best + self.min_delta:
            self.best = val_acc
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.lr /= self.factor
            self.stale = 0
            self.drops += 1
            return True
        return False


@dataclass
class EvalResult:
    per_class: np.ndarray           # accuracy per class
    mean_accuracy: float            # mean of per-class accuracies
    accuracy: float                 # fraction of videos correct
    clip_predictions: np.ndarray    # (videos, clips, classes)
    video_predictions: np.ndarray   # (videos, classes), clip average
    labels: np.ndarray
    mode: str                       # "softmax" or "pre-softmax"


@dataclass
class TrainResult:
    net: Network
    history: list[dict] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "lr", "train_loss", "val_acc"])
        for h in self.history:
            w.writerow([h["epoch"], repr(h["lr"]), repr(h["train_loss"]), repr(h["val_acc"])])
        return buf.getvalue()


def _batch(clips: Sequence[ClipSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rgb = np.stack([c.rgb for c in clips])
    flow = np.stack([c.flow for c in clips])
    labels = np.array([c.label for c in clips])
    return rgb, flow, labels


def head_loss(net: Network, scores: dict[str, Tensor], labels: np.ndarray) -> Tensor:
    """Sum of per-head losses with equal weight."""
    total = None
    kinds = net.head_losses
    for head, s in scores.items():
        loss = ops.multiclass_hinge(s, labels) if kinds[head] == "hinge" else ops.cross_entropy(s, labels)
        total = loss if total is None else total + loss
    return total


def _check_data(net: Network, videos: list, cfg: TrainConfig, what: str) -> None:
    if not videos:
        raise ValueError(f"{what} split is empty")
    bad = [v.label for v in videos if not 0 <= v.label < net.classes]
    if bad:
        raise ValueError(f"{what} split has labels {sorted(set(bad))} outside {net.classes} classes")
    for stream, plan in net.towers.items():
        want = plan.in_channels
        have = 3 if stream == SPATIAL else 2 * cfg.L
        if want != have:
            raise ValueError(f"{stream} tower expects {want} input channels, "
                             f"data with L={cfg.L} gives {have}")


def train(net: Network, dataset: Dataset, cfg: TrainConfig, log=None) -> TrainResult:
    """Train the non-frozen parameters of ``net`` on the train split.

    Frozen parameters (everything at or below the backprop barrier) never
    receive gradients and are checked to be bitwise unchanged at the end.
    """
    train_v, val_v = dataset.split("train"), dataset.split("val")
    _check_data(net, train_v, cfg, "train")
    if not val_v:
        raise ValueError("val split is empty")
    size = next(iter(net.towers.values())).arch.input_size
    flows = {v.index: v.flows() for v in train_v}
    frozen = {k: net.params[k].data.copy() for k in net.frozen}
    for k, p in net.params.items():
        p.requires_grad = k not in net.frozen
    opt = SGD(net.trainable(), cfg.lr, cfg.momentum, cfg.weight_decay)
    sched = PlateauSchedule(cfg.lr, cfg.lr_drop, cfg.patience, cfg.min_delta)
    data_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    if cfg.dropout is not None:
        net.dropout = cfg.dropout
    result = TrainResult(net)
    for epoch in range(1, cfg.max_epochs + 1):
        order = data_rng.permutation(len(train_v))
        losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            idx = order[b0:b0 + cfg.batch_size]
            clips = [sample_training_clip(train_v[i], cfg.T, cfg.tau_range, cfg.L, data_rng,
                                          size, flows=flows[train_v[i].index]) for i in idx]
            rgb, flow, labels = _batch(clips)
            opt.zero_grad()
            loss = head_loss(net, net.forward(rgb, flow, training=True, rng=drop_rng), labels)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss is {value} at epoch {epoch}, batch {b0 // cfg.batch_size}"
                                       f" (lr {opt.lr:g})")
            loss.backward()
            opt.step()
            losses.append(value * len(idx))
        val = evaluate(net, val_v, cfg).accuracy
        entry = {"epoch": epoch, "lr": opt.lr, "train_loss": sum(losses) / len(order),
                 "val_acc": val}
        result.history.append(entry)
        if log:
            log(entry)
        drops_before = sched.drops
        if sched.step(val):
            if drops_before >= cfg.max_drops:
                break
            opt.lr = sched.lr
    for k, v in frozen.items():
        if not np.array_equal(net.params[k].data, v):
            raise AssertionError(f"frozen parameter {k} changed during training")
    return result


def evaluate(net: Network, videos, cfg: TrainConfig | None = None, clips: int | None = None,
             flips: bool | None = None, pre_softmax: bool | None = None,
             batch_videos: int = 16) -> EvalResult:
    """Average predictions over clips, flips and retained towers, then argmax."""
    cfg = cfg or TrainConfig()
    if isinstance(videos, Dataset):
        videos = videos.split("test")
    if not videos:
        raise ValueError("nothing to evaluate")
    clips = cfg.test_clips if clips is None else clips
    flips = cfg.test_flips if flips is None else flips
    pre = cfg.pre_softmax if pre_softmax is None else pre_softmax
    size = next(iter(net.towers.values())).arch.input_size
    per_video = []
    for v0 in range(0, len(videos), batch_videos):
        chunk = videos[v0:v0 + batch_videos]
        samples = [sample_test_clips(v, cfg.T, clips, flips, cfg.eval_tau, cfg.L, size)
                   for v in chunk]
        k = len(samples[0])
        rgb, flow, _ = _batch([c for s in samples for c in s])
        p = net.predict(rgb, flow, pre_softmax=pre)
        per_video.extend(p.reshape(len(chunk), k, -1))
    clip_pred = np.stack(per_video)
    labels = np.array([v.label for v in videos])
    return summarize(clip_pred, labels, net.classes, "pre-softmax" if pre else "softmax")


def summarize(clip_pred: np.ndarray, labels: np.ndarray, classes: int,
              mode: str = "softmax") -> EvalResult:
    video_pred = clip_pred.mean(axis=1)
    hit = video_pred.argmax(axis=1) == labels
    per_class = np.array([hit[labels == c].mean() if np.any(labels == c) else np.nan
                          for c in range(classes)])
    return EvalResult(per_class, float(np.nanmean(per_class)), float(hit.mean()),
                      clip_pred, video_pred, labels, mode)


# -- persistence --------------------------------------------------------------------


def save_checkpoint(net: Network, directory) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, p in sorted(net.params.items()):
        save_tensor(d / f"{k}.tns", p.data)
    return d


def load_checkpoint(net: Network, directory) -> None:
    d = Path(directory)
    state = {f.name[:-4]: load_tensor(f) for f in sorted(d.glob("*.tns"))}
    missing = set(net.params) - set(state)
    if missing:
        raise ValueError(f"checkpoint {d} lacks {sorted(missing)}")
    net.load_state(state)


# -- experiments --------------------------------------------------------------------


@dataclass
class GridSpec:
    fusion: FusionSpec
    placement: FusionPlacement
    temporal_head: TemporalHead | str = TemporalHead.POOL2D
    name: str = ""

    def label(self) -> str:
        if self.name:
            return self.name
        where = self.placement.label or "softmax"
        return f"{self.fusion.method.value}@{where}/{TemporalHead(self.temporal_head).value}"


@dataclass
class GridRow:
    name: str
    accuracy: float
    layers: int
    params: int


def rows_to_csv(rows: Sequence[GridRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["name", "accuracy", "layers", "params"])
    for r in rows:
        w.writerow([r.name, f"{r.accuracy:.4f}", r.layers, r.params])
    return buf.getvalue()


def train_streams(dataset: Dataset, spatial: Arch, temporal: Arch, cfg: TrainConfig,
                  log=None) -> dict[str, Network]:
    """Train each tower on its own; these initialise every fused network."""
    out = {}
    for stream, arch in ((SPATIAL, spatial), (TEMPORAL, temporal)):
        net = build_single_stream(arch, stream, seed=cfg.seed)
        train(net, dataset, cfg, log=log)
        out[stream] = net
    return out


def ablation_grid(dataset: Dataset, specs: Sequence[GridSpec], spatial: Arch, temporal: Arch,
                  cfg: TrainConfig, streams: dict[str, Network] | None = None,
                  log=None) -> list[GridRow]:
    """Build, initialise from the single streams, train and test every spec."""
    rows = []
    for spec in specs:
        net = build_two_stream(spatial, temporal, spec.fusion, spec.placement,
                               spec.temporal_head, seed=cfg.seed)
        if streams:
            for s in streams.values():
                net.load_from(s)
        if cfg.max_epochs > 0:
            train(net, dataset, cfg, log=log)
        acc = evaluate(net, dataset.split("test"), cfg).accuracy
        report = net.param_report()
        rows.append(GridRow(spec.label(), acc, report.layers, report.total))
    return rows


def run_manifest(command: str, config: dict, seed: int, outputs: dict,
                 hashes: dict) -> str:
    return json.dumps({"subcommand": command, "config": config, "seed": seed,
                       "outputs": outputs, "hashes": hashes}, indent=1, sort_keys=True,
                      default=str)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
