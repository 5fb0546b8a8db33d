"""Command-line entry point: ``twostream <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 validation failure, 3 numeric failure.
Every subcommand writes one ``<subcommand>.manifest.json`` into its output
directory (the current directory when it has none).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import experiment, report
from .archfile import Arch, ArchError, load_arch
from .fusion import FusionSpec, Init, Method
from .gradcheck import NEGATIVE_CONTROL, SUITES, run_suite
from .network import (SPATIAL, TEMPORAL, Direction, FusionPlacement, Network, TemporalHead,
                      build_single_stream)
from .synth import Dataset, Geometry, frames_required, generate_dataset, load_dataset, save_dataset
from .tensor import save_tensor
from .train import (GridRow, GridSpec, TrainConfig, TrainingDiverged, ablation_grid, evaluate,
                    load_checkpoint, rows_to_csv, save_checkpoint, train, train_streams)

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_manifest(out: Path, command: str, args: argparse.Namespace, outputs: dict,
                    hashes: dict | None = None, extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    config = {k: v for k, v in vars(args).items() if k not in ("func",)}
    doc = {"subcommand": command, "seed": getattr(args, "seed", None), "config": config,
           "outputs": {k: str(v) for k, v in outputs.items()}, "hashes": hashes or {}}
    if extra:
        doc.update(extra)
    path = out / f"{command}.manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=str) + "\n")
    return path


def _tau(text: str) -> tuple[int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2 or parts[0] < 1 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError(f"tau must be 'n' or 'lo,hi' with 1 <= lo <= hi, got {text!r}")
    return parts[0], parts[1]


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(p) for p in text.split(","))


def _load_arch(name: str) -> Arch:
    try:
        return load_arch(name)
    except FileNotFoundError as exc:
        raise ValidationError(str(exc)) from None


# -- gen-data ------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    geo = Geometry(size=args.size, frames=args.frames, patch=args.patch, speed=args.speed,
                   amplitude=args.amplitude, block=args.block, search_radius=args.radius)
    ds = generate_dataset(args.seed, args.na, args.nm, args.per_class, geo, threads=args.threads)
    out = Path(args.out)
    idx = save_dataset(ds, out)
    _write_manifest(out, "gen-data", args, {"dataset": out, "index": idx},
                    {"dataset": ds.digest()})
    print(f"{len(ds.videos)} videos, {ds.classes} classes -> {out} (digest {ds.digest()[:16]})")
    return EXIT_OK


# -- paramcount ----------------------------------------------------------------------


def _towers(args) -> tuple[Arch, Arch]:
    spatial = _load_arch(args.arch)
    temporal = _load_arch(args.temporal_arch) if args.temporal_arch else spatial
    if args.classes:
        spatial, temporal = spatial.with_classes(args.classes), temporal.with_classes(args.classes)
    if args.temporal_channels:
        temporal = temporal.with_temporal_channels(args.temporal_channels)
    return spatial, temporal


def cmd_paramcount(args) -> int:
    spatial, temporal = _towers(args)
    out = Path(args.out)
    if args.sweep:
        rows = experiment.sweep(args.sweep, spatial, temporal)
        print(experiment.format_table(rows))
        csv_path = out / f"paramcount-{args.sweep}.csv"
        out.mkdir(parents=True, exist_ok=True)
        csv_path.write_text(experiment.sweep_csv(rows))
        fig = report.plot_params([r.report for r in rows], out / f"paramcount-{args.sweep}.png")
        outputs = {"csv": csv_path, "figure": fig}
    else:
        try:
            rep = experiment.count(spatial, temporal, args.fusion or Method.SUM, args.at or "",
                                   args.keep_both, args.head)
        except ValueError as exc:
            raise ValidationError(str(exc)) from None
        method = (args.fusion or "sum").capitalize()
        row = experiment.SweepRow(method, args.at or "softmax", rep)
        print(experiment.format_table([row]))
        if args.per_layer:
            for r in rep.rows:
                print(f"  {r.stream:9s} {r.layer:12s} {r.params:>12,d}")
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "paramcount.csv"
        csv_path.write_text(rep.to_csv())
        outputs = {"csv": csv_path}
    _write_manifest(out, "paramcount", args, outputs,
                    {"spatial_arch": spatial.digest, "temporal_arch": temporal.digest})
    return EXIT_OK


# -- gradcheck -----------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    names = list(SUITES) if args.ops == "all" else [n.strip() for n in args.ops.split(",") if n.strip()]
    unknown = [n for n in names if n not in SUITES and n != NEGATIVE_CONTROL]
    if unknown:
        raise UsageError(f"unknown op(s) {', '.join(unknown)}; choose from all, {', '.join(SUITES)}")
    if args.negative_control and NEGATIVE_CONTROL not in names:
        names.append(NEGATIVE_CONTROL)
    failed = 0
    results = []
    for n in names:
        r = run_suite(n, trials=args.trials, seed=args.seed, tol=args.tol)
        results.append(r)
        status = "PASS" if r.passed else "FAIL"
        failed += not r.passed
        print(f"{status}  {r.op:14s} shapes={r.shapes}  max_rel_err={r.max_rel_error:.3e}")
    out = Path(args.out)
    _write_manifest(out, "gradcheck", args, {},
                    extra={"results": [{"op": r.op, "max_rel_error": r.max_rel_error,
                                        "passed": r.passed} for r in results]})
    return EXIT_INVALID if failed else EXIT_OK


# -- train / eval / ablate -----------------------------------------------------------


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch, lr=args.lr, momentum=args.momentum,
                       weight_decay=args.weight_decay, lr_drop=args.lr_drop,
                       patience=args.patience, max_drops=args.max_drops,
                       max_epochs=args.epochs, seed=args.seed, T=args.T, tau_range=args.tau,
                       L=args.L, test_tau=args.test_tau, test_clips=args.clips,
                       test_flips=args.flips, pre_softmax=args.pre_softmax,
                       dropout=args.dropout)


def _load_data(path: str) -> Dataset:
    p = Path(path)
    if not p.is_dir():
        raise ValidationError(f"data directory {p} does not exist")
    try:
        return load_dataset(p)
    except (FileNotFoundError, ValueError) as exc:
        raise ValidationError(str(exc)) from None


def _check_compat(spatial: Arch, temporal: Arch, ds: Dataset, cfg: TrainConfig) -> None:
    for a in (spatial, temporal):
        if a.classes != ds.classes:
            raise ValidationError(f"architecture {a.name} has {a.classes} classes, "
                                  f"data has {ds.classes} (use --classes {ds.classes})")
    if temporal.temporal_channels != 2 * cfg.L:
        raise ValidationError(f"temporal tower expects {temporal.temporal_channels} input channels; "
                              f"L={cfg.L} gives {2 * cfg.L}")
    need = frames_required(cfg.T, max(cfg.tau_range[1], cfg.eval_tau), cfg.L)
    have = min(v.num_frames for v in ds.videos)
    if have < need:
        raise ValidationError(f"videos have {have} frames; T={cfg.T}, tau<={cfg.tau_range[1]}, "
                              f"L={cfg.L} needs at least {need}")


def _net_from_args(args, spatial: Arch, temporal: Arch, seed: int) -> Network:
    fusion = FusionSpec(args.fusion or Method.CONV, args.init, args.temporal_scale, args.sigma)
    if args.stream in (SPATIAL, TEMPORAL):
        return build_single_stream(spatial if args.stream == SPATIAL else temporal, args.stream,
                                   seed=seed, barrier=not args.no_barrier)
    placement = (FusionPlacement.at(args.at, args.keep_both, args.direction)
                 if args.at else FusionPlacement())
    try:
        return Network(spatial, temporal, fusion, placement, args.head, seed=seed,
                       barrier=not args.no_barrier)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None


def _model_files(out: Path, spatial: Arch, temporal: Arch) -> dict:
    (out / "spatial.arch").write_text(spatial.to_text())
    (out / "temporal.arch").write_text(temporal.to_text())
    return {"spatial_arch": out / "spatial.arch", "temporal_arch": out / "temporal.arch"}


def cmd_train(args) -> int:
    ds = _load_data(args.data)
    cfg = _train_config(args)
    spatial, temporal = _towers(args)
    _check_compat(spatial, temporal, ds, cfg)
    net = _net_from_args(args, spatial, temporal, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for src in args.init_from or []:
        other = Path(src)
        m = json.loads((other / "train.manifest.json").read_text())
        donor = _net_from_args(argparse.Namespace(**m["config"]),
                               _load_arch(str(other / "spatial.arch")),
                               _load_arch(str(other / "temporal.arch")), args.seed)
        load_checkpoint(donor, other / "checkpoint")
        copied = net.load_from(donor)
        print(f"initialised {len(copied)} tensors from {other}")

    def log(e):
        print(f"epoch {e['epoch']:3d}  lr {e['lr']:.2e}  loss {e['train_loss']:.4f}  "
              f"val {e['val_acc']:.3f}", flush=True)

    t0 = time.time()
    result = train(net, ds, cfg, log=log if not args.quiet else None)
    ev = evaluate(net, ds.split("test"), cfg)
    files = _model_files(out, spatial, temporal)
    ckpt = save_checkpoint(net, out / "checkpoint")
    hist = out / "history.csv"
    hist.write_text(result.history_csv())
    res = out / "results.csv"
    res.write_text(_results_csv(ev))
    fig = report.plot_history(result.history, out / "history.png")
    print(f"test accuracy {ev.accuracy:.4f} (mean per class {ev.mean_accuracy:.4f}) "
          f"in {time.time() - t0:.1f}s")
    _write_manifest(out, "train", args, dict(files, checkpoint=ckpt, history=hist, results=res,
                                             figure=fig),
                    {"dataset": ds.digest(), "spatial_arch": spatial.digest,
                     "temporal_arch": temporal.digest},
                    {"train_config": asdict(cfg), "test_accuracy": ev.accuracy})
    return EXIT_OK


def _results_csv(ev) -> str:
    lines = ["class,accuracy"]
    lines += [f"{c},{a:.4f}" for c, a in enumerate(ev.per_class)]
    lines.append(f"mean,{ev.mean_accuracy:.4f}")
    lines.append(f"overall,{ev.accuracy:.4f}")
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    ds = _load_data(args.data)
    run = Path(args.run)
    mpath = run / "train.manifest.json"
    if not mpath.is_file():
        raise ValidationError(f"{run} is not a training run directory (no train.manifest.json)")
    m = json.loads(mpath.read_text())
    targs = argparse.Namespace(**m["config"])
    spatial = _load_arch(str(run / "spatial.arch"))
    temporal = _load_arch(str(run / "temporal.arch"))
    cfg = replace(TrainConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                                 for k, v in m["train_config"].items()}),
                  test_clips=args.clips, test_flips=args.flips, pre_softmax=args.pre_softmax)
    if args.test_tau:
        cfg = replace(cfg, test_tau=args.test_tau)
    _check_compat(spatial, temporal, ds, cfg)
    net = _net_from_args(targs, spatial, temporal, targs.seed)
    if not args.untrained:
        load_checkpoint(net, run / "checkpoint")
    ev = evaluate(net, ds.split(args.split), cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = out / "eval.csv"
    res.write_text(_results_csv(ev))
    preds = out / "predictions.tns"
    save_tensor(preds, ev.clip_predictions)
    fig = report.plot_confusion(ev.labels, ev.video_predictions.argmax(axis=1), net.classes,
                                out / "confusion.png")
    print(f"{args.split} accuracy {ev.accuracy:.4f} over {len(ev.labels)} videos "
          f"({ev.clip_predictions.shape[1]} clips each, {ev.mode})")
    _write_manifest(out, "eval", args, {"results": res, "predictions": preds, "figure": fig},
                    {"dataset": ds.digest(), "run": _sha256(mpath)},
                    {"accuracy": ev.accuracy})
    return EXIT_OK


def _parse_spec(text: str, softmax_layer: str) -> GridSpec:
    """``method@points[/head]``, e.g. ``conv@relu3/3d-pool`` or ``sum@softmax``."""
    method, _, rest = text.partition("@")
    where, _, head = rest.partition("/")
    try:
        m = Method(method)
        h = TemporalHead(head or "2d")
    except ValueError as exc:
        raise UsageError(f"bad spec {text!r}: {exc}") from None
    if not where:
        raise UsageError(f"bad spec {text!r}: missing fusion point after '@'")
    placement = FusionPlacement.at(softmax_layer if where == "softmax" else where)
    return GridSpec(FusionSpec(m), placement, h, name=text)


def cmd_ablate(args) -> int:
    out = Path(args.out)
    cfg = _train_config(args)
    if args.preset == "ordering":
        ocfg = experiment.OrderingConfig(seeds=tuple(range(args.seed, args.seed + args.seeds)))
        ds = _load_data(args.data) if args.data else None
        res = experiment.ordering_experiment(ocfg, ds, log=print)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / "ordering.csv"
        csv_path.write_text(res.to_csv())
        rows = [experiment_row(n, res) for n in res.names]
        fig = report.plot_ablation(rows, out / "ordering.png")
        for n in res.names:
            print(f"{n:18s} median {res.median(n):.3f}")
        _write_manifest(out, "ablate", args, {"csv": csv_path, "figure": fig})
        return EXIT_OK
    if not args.data:
        raise UsageError("ablate needs --data (or --preset ordering)")
    ds = _load_data(args.data)
    spatial, temporal = _towers(args)
    _check_compat(spatial, temporal, ds, cfg)
    specs = [_parse_spec(s, spatial.layers[-1].name) for s in args.spec]
    for spec in specs:
        try:
            Network(spatial, temporal, spec.fusion, spec.placement, spec.temporal_head,
                    materialize=False)
        except ValueError as exc:
            raise ValidationError(f"spec {spec.name!r}: {exc}") from None
    streams = None if args.no_pretrain or not specs else train_streams(ds, spatial, temporal, cfg)
    try:
        rows = ablation_grid(ds, specs, spatial, temporal, cfg, streams)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "ablation.csv"
    csv_path.write_text(rows_to_csv(rows))
    outputs = {"csv": csv_path}
    if rows:
        outputs["figure"] = report.plot_ablation(rows, out / "ablation.png")
    print(rows_to_csv(rows), end="")
    _write_manifest(out, "ablate", args, outputs,
                    {"dataset": ds.digest(), "spatial_arch": spatial.digest,
                     "temporal_arch": temporal.digest})
    return EXIT_OK


def experiment_row(name: str, res) -> GridRow:
    return GridRow(name, res.median(name), res.layers[name], res.params[name])


# -- parser --------------------------------------------------------------------------


def _arch_flags(p) -> None:
    p.add_argument("--arch", default="vgg-m-2048",
                   help="architecture file, or a bundled name (vgg-m-2048, vgg-16, vgg-tiny)")
    p.add_argument("--temporal-arch", default=None,
                   help="architecture of the temporal tower (default: same as --arch)")
    p.add_argument("--classes", type=int, default=None, help="override the class count")
    p.add_argument("--temporal-channels", type=int, default=None,
                   help="override the temporal input depth (2L)")


def _fusion_flags(p) -> None:
    p.add_argument("--fusion", choices=[m.value for m in Method], default=None,
                   help="fusion method applied at --at points without their own method")
    p.add_argument("--at", default=None,
                   help="fusion points, e.g. relu5, relu5,fc8 or relu3:sum,relu5:conv,fc6:cat")
    p.add_argument("--keep-both", action="store_true",
                   help="keep the feeding tower above a single fusion point")
    p.add_argument("--direction", choices=[d.value for d in Direction],
                   default=Direction.INTO_SPATIAL.value)
    p.add_argument("--head", choices=[h.value for h in TemporalHead], default="2d",
                   help="temporal head: 2-D pooling, 3-D pooling, or 3-D conv + 3-D pooling")


def _train_flags(p) -> None:
    p.add_argument("--data", required=False, help="dataset directory written by gen-data")
    p.add_argument("--out", default="run", help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1, help="worker cap (training is serial)")
    p.add_argument("--T", type=int, default=5, help="temporal chunks per clip")
    p.add_argument("--tau", type=_tau, default=(1, 10), help="stride range 'lo,hi' or fixed 'n'")
    p.add_argument("--L", type=int, default=10, help="flow fields stacked per chunk")
    p.add_argument("--test-tau", type=int, default=None, help="stride at test time (default: lo)")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--lr-drop", type=float, default=10.0)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0)
    p.add_argument("--patience", type=int, default=2)
    p.add_argument("--max-drops", type=int, default=2)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=16)
    p.add_argument("--dropout", type=_floats, default=None,
                   help="dropout rates of the fc dropout layers, e.g. 0.85,0.85")
    p.add_argument("--clips", type=int, default=1, help="test clips per video")
    p.add_argument("--flips", action="store_true", help="add mirrored test clips")
    p.add_argument("--pre-softmax", action="store_true", help="average scores, not softmax")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="twostream", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic appearance x motion dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--na", type=int, default=2, help="number of textures")
    p.add_argument("--nm", type=int, default=2, help="number of motions")
    p.add_argument("--per-class", default="50", help="n, or train,val,test videos per class")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--frames", type=int, default=51, help="frames per video")
    p.add_argument("--size", type=int, default=32, help="frame side in pixels")
    p.add_argument("--patch", type=int, default=8)
    p.add_argument("--speed", type=int, default=2, help="pixels per frame")
    p.add_argument("--amplitude", type=int, default=4, help="oscillation half-range")
    p.add_argument("--block", type=int, default=5, help="flow block size (odd)")
    p.add_argument("--radius", type=int, default=3, help="flow search radius")
    p.add_argument("--threads", type=int, default=1, help="worker threads")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("paramcount", help="layer and parameter accounting")
    _arch_flags(p)
    _fusion_flags(p)
    p.add_argument("--sweep", choices=sorted(experiment.SWEEPS), default=None,
                   help="emit every row of a fusion-method or fusion-layer sweep")
    p.add_argument("--per-layer", action="store_true", help="print per-layer counts")
    p.add_argument("--out", default=".", help="directory for the CSV and manifest")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_paramcount)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--ops", default="all", help=f"all, or a comma list of: {', '.join(SUITES)}")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=5, help="random shapes per op")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--negative-control", action="store_true",
                   help=f"also run the {NEGATIVE_CONTROL} fixture, which must fail")
    p.add_argument("--out", default=".", help="directory for the manifest")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("train", help="train a single-stream or fused network")
    _arch_flags(p)
    _fusion_flags(p)
    _train_flags(p)
    p.add_argument("--stream", choices=["two", SPATIAL, TEMPORAL], default="two")
    p.add_argument("--init", choices=[i.value for i in Init], default="identity",
                   help="conv fusion filter initialisation")
    p.add_argument("--temporal-scale", type=float, default=3.0)
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--no-barrier", action="store_true",
                   help="backpropagate through the towers below the fusion point")
    p.add_argument("--init-from", action="append", default=None,
                   help="training run directory to copy matching weights from (repeatable)")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a trained run")
    p.add_argument("--data", required=True)
    p.add_argument("--run", required=True, help="directory written by train")
    p.add_argument("--out", default="eval")
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--clips", type=int, default=1)
    p.add_argument("--flips", action="store_true")
    p.add_argument("--pre-softmax", action="store_true")
    p.add_argument("--test-tau", type=int, default=None)
    p.add_argument("--untrained", action="store_true", help="skip loading the checkpoint")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and test a grid of fusion configurations")
    _arch_flags(p)
    _train_flags(p)
    p.add_argument("--spec", action="append", default=[],
                   help="method@points[/head], e.g. conv@relu3/3d-pool or sum@softmax (repeatable)")
    p.add_argument("--no-pretrain", action="store_true",
                   help="start fused nets from scratch instead of trained single streams")
    p.add_argument("--preset", choices=["ordering"], default=None,
                   help="run the canned synthetic ordering experiment")
    p.add_argument("--seeds", type=int, default=5, help="seeds for --preset ordering")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "func", None):
            parser.print_help()
            return EXIT_USAGE
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ArchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
