"""Parser for the architecture description files.

Format: ``key = value`` lines, ``#`` comments, and one ``[name]`` block per
layer in execution order. Keys before the first block describe the network::

    name = vgg-tiny
    input_size = 24
    classes = 4
    spatial_channels = 3
    temporal_channels = 6

    [conv1]
    type = conv
    filters = 8
    kernel = 3
    pad = 1

Layer types: ``conv`` (filters, kernel, stride, pad), ``pool`` (kernel,
stride, pad), ``fc`` (units; ``classes`` is accepted as a value), ``relu``,
``lrn`` (parameter free, skipped at run time), ``dropout`` (rate) and
``softmax``. ``pad`` is either one int or ``before,after``.

Every error is a :class:`ArchError` naming the offending line.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

LAYER_TYPES = {"conv", "pool", "fc", "relu", "lrn", "dropout", "softmax"}
HEADER_KEYS = {"name", "input_size", "classes", "spatial_channels", "temporal_channels"}
LAYER_KEYS = {
    "conv": {"type", "filters", "kernel", "stride", "pad"},
    "pool": {"type", "kernel", "stride", "pad"},
    "fc": {"type", "units"},
    "relu": {"type"},
    "lrn": {"type"},
    "dropout": {"type", "rate"},
    "softmax": {"type"},
}


class ArchError(ValueError):
    def __init__(self, msg: str, line: int | None = None, source: str = "<arch>"):
        self.line = line
        where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(where + msg)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    filters: int = 0
    kernel: int = 1
    stride: int = 1
    pad: tuple[int, int] = (0, 0)
    units: int = 0
    rate: float = 0.0
    line: int = 0

    @property
    def weighted(self) -> bool:
        return self.kind in ("conv", "fc")


@dataclass
class Arch:
    name: str
    input_size: int
    classes: int
    spatial_channels: int
    temporal_channels: int
    layers: list[LayerSpec] = field(default_factory=list)
    text: str = ""

    def layer(self, name: str) -> LayerSpec:
        for spec in self.layers:
            if spec.name == name:
                return spec
        raise KeyError(f"{self.name} has no layer named {name!r}")

    def index(self, name: str) -> int:
        for i, spec in enumerate(self.layers):
            if spec.name == name:
                return i
        raise KeyError(f"{self.name} has no layer named {name!r}")

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def with_classes(self, classes: int) -> "Arch":
        return Arch(self.name, self.input_size, classes, self.spatial_channels,
                    self.temporal_channels, list(self.layers))

    def with_temporal_channels(self, channels: int) -> "Arch":
        return Arch(self.name, self.input_size, self.classes, self.spatial_channels,
                    channels, list(self.layers))

    def to_text(self) -> str:
        out = [f"name = {self.name}", f"input_size = {self.input_size}",
               f"classes = {self.classes}",
               f"spatial_channels = {self.spatial_channels}",
               f"temporal_channels = {self.temporal_channels}"]
        for spec in self.layers:
            out += ["", f"[{spec.name}]", f"type = {spec.kind}"]
            if spec.kind == "conv":
                out.append(f"filters = {spec.filters}")
            if spec.kind in ("conv", "pool"):
                out += [f"kernel = {spec.kernel}", f"stride = {spec.stride}",
                        f"pad = {spec.pad[0]},{spec.pad[1]}"]
            if spec.kind == "fc":
                out.append(f"units = {spec.units}")
            if spec.kind == "dropout":
                out.append(f"rate = {spec.rate}")
        return "\n".join(out) + "\n"


def _int(value: str, key: str, line: int, source: str, minimum: int = 1) -> int:
    try:
        v = int(value)
    except ValueError:
        raise ArchError(f"{key} must be an integer, got {value!r}", line, source) from None
    if v < minimum:
        raise ArchError(f"{key} must be >= {minimum}, got {v}", line, source)
    return v


def parse_arch(text: str, source: str = "<arch>") -> Arch:
    header: dict[str, tuple[str, int]] = {}
    blocks: list[tuple[str, int, dict[str, tuple[str, int]]]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise ArchError(f"malformed block header {raw.strip()!r}", lineno, source)
            name = line[1:-1].strip()
            if any(name == b[0] for b in blocks):
                raise ArchError(f"duplicate layer name {name!r}", lineno, source)
            blocks.append((name, lineno, {}))
            continue
        if "=" not in line:
            raise ArchError(f"expected 'key = value', got {raw.strip()!r}", lineno, source)
        key, value = (s.strip() for s in line.split("=", 1))
        target = blocks[-1][2] if blocks else header
        if key in target:
            raise ArchError(f"duplicate key {key!r}", lineno, source)
        target[key] = (value, lineno)

    for key in header:
        if key not in HEADER_KEYS:
            raise ArchError(f"unknown header key {key!r}", header[key][1], source)
    for key in ("name", "input_size", "classes", "spatial_channels", "temporal_channels"):
        if key not in header:
            raise ArchError(f"missing header key {key!r}", None, source)
    classes = _int(header["classes"][0], "classes", header["classes"][1], source)
    arch = Arch(
        name=header["name"][0],
        input_size=_int(header["input_size"][0], "input_size", header["input_size"][1], source),
        classes=classes,
        spatial_channels=_int(header["spatial_channels"][0], "spatial_channels",
                              header["spatial_channels"][1], source),
        temporal_channels=_int(header["temporal_channels"][0], "temporal_channels",
                               header["temporal_channels"][1], source),
        text=text,
    )
    if not blocks:
        raise ArchError("no layers defined", None, source)
    for name, lineno, kv in blocks:
        if "type" not in kv:
            raise ArchError(f"layer {name!r} has no type", lineno, source)
        kind, tline = kv["type"]
        if kind not in LAYER_TYPES:
            raise ArchError(f"unknown layer type {kind!r}", tline, source)
        for key, (_, kline) in kv.items():
            if key not in LAYER_KEYS[kind]:
                raise ArchError(f"key {key!r} not valid for {kind} layer", kline, source)
        args: dict = {"name": name, "kind": kind, "line": lineno}
        if kind == "conv":
            if "filters" not in kv:
                raise ArchError(f"conv layer {name!r} needs filters", lineno, source)
            args["filters"] = _int(kv["filters"][0], "filters", kv["filters"][1], source)
        if kind in ("conv", "pool"):
            if "kernel" not in kv:
                raise ArchError(f"{kind} layer {name!r} needs kernel", lineno, source)
            args["kernel"] = _int(kv["kernel"][0], "kernel", kv["kernel"][1], source)
            if "stride" in kv:
                args["stride"] = _int(kv["stride"][0], "stride", kv["stride"][1], source)
            elif kind == "pool":
                args["stride"] = args["kernel"]
            if "pad" in kv:
                value, pline = kv["pad"]
                parts = [p.strip() for p in value.split(",")]
                if len(parts) not in (1, 2):
                    raise ArchError(f"pad must be 'n' or 'before,after', got {value!r}",
                                    pline, source)
                nums = [_int(p, "pad", pline, source, minimum=0) for p in parts]
                args["pad"] = (nums[0], nums[-1])
        if kind == "fc":
            if "units" not in kv:
                raise ArchError(f"fc layer {name!r} needs units", lineno, source)
            value, uline = kv["units"]
            args["units"] = classes if value == "classes" else _int(value, "units", uline, source)
        if kind == "dropout":
            value, rline = kv.get("rate", ("0.5", lineno))
            try:
                rate = float(value)
            except ValueError:
                raise ArchError(f"rate must be a number, got {value!r}", rline, source) from None
            if not 0.0 <= rate < 1.0:
                raise ArchError(f"rate must be in [0, 1), got {rate}", rline, source)
            args["rate"] = rate
        arch.layers.append(LayerSpec(**args))
    return arch


def load_arch(path) -> Arch:
    """Load an arch file by path, or a bundled one by name (e.g. ``vgg-m-2048``)."""
    p = Path(path)
    if p.exists():
        return parse_arch(p.read_text(), source=str(p))
    name = str(path)
    res = resources.files("twostream") / "archs" / f"{name}.arch"
    if res.is_file():
        return parse_arch(res.read_text(), source=f"{name}.arch")
    raise FileNotFoundError(f"no architecture file {path!r}")


def bundled_archs() -> list[str]:
    root = resources.files("twostream") / "archs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".arch"))
