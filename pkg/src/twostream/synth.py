"""Synthetic appearance x motion videos, clip sampling and augmentation.

Every video shows one patch per texture on a static noisy gray background.
Exactly one patch moves, oscillating along a direction picked by the motion
id; the label is the pair (moving texture, motion). A single frame shows all
textures, so appearance alone cannot tell which one moves, and the flow of
the moving patch does not depend on its texture, so motion alone cannot tell
which texture it belongs to. Only registering the two at the same location
separates the classes.

Each video gets its own RNG stream spawned from the master seed, so videos
can be generated in any order or in parallel with identical results.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .flow import build_flow_stack, dequantize_flow, flip_flow_stack, quantize_flow, video_flows
from .tensor import load_tensor, save_tensor

SPLITS = ("train", "val", "test")

# Colour directions with equal L1 distance from mid gray.
PALETTE = np.array([
    [0.8, 0.3, 0.3], [0.3, 0.8, 0.3], [0.3, 0.3, 0.8],
    [0.2, 0.7, 0.7], [0.7, 0.2, 0.7], [0.7, 0.7, 0.2],
])


@dataclass(frozen=True)
class Geometry:
    size: int = 32
    frames: int = 16
    patch: int = 8
    speed: int = 2
    amplitude: int = 4
    contrast: float = 0.35
    background: float = 0.06
    block: int = 5
    search_radius: int = 3

    def __post_init__(self):
        if self.amplitude < self.speed or self.speed < 1:
            raise ValueError("need 1 <= speed <= amplitude")
        if self.speed > self.search_radius:
            raise ValueError("speed exceeds the flow search radius")


@dataclass
class SynthVideo:
    frames: np.ndarray          # (n, H, W, 3) uint8
    flow_q: np.ndarray          # (n-1, H, W, 2) uint8, (u, v)
    label: int
    texture: int
    motion: int
    split: str
    index: int
    positions: list = field(default_factory=list)   # top-left (y, x) per texture
    phase: int = 0

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    def flows(self) -> np.ndarray:
        return dequantize_flow(self.flow_q)

    def meta(self) -> dict:
        return {"label": self.label, "texture": self.texture, "motion": self.motion,
                "split": self.split, "index": self.index,
                "positions": [list(p) for p in self.positions], "phase": self.phase}


@dataclass
class Dataset:
    videos: list[SynthVideo]
    seed: int
    na: int
    nm: int
    per_class: tuple[int, int, int]
    geometry: Geometry

    @property
    def classes(self) -> int:
        return self.na * self.nm

    def split(self, name: str) -> list[SynthVideo]:
        return [v for v in self.videos if v.split == name]

    def params(self) -> dict:
        return {"seed": self.seed, "na": self.na, "nm": self.nm,
                "per_class": list(self.per_class), "geometry": asdict(self.geometry)}

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.params(), sort_keys=True).encode())
        for v in self.videos:
            h.update(json.dumps(v.meta(), sort_keys=True).encode())
            h.update(v.frames.tobytes())
            h.update(v.flow_q.tobytes())
        return h.hexdigest()


def class_label(texture: int, motion: int, nm: int) -> int:
    return texture * nm + motion


def motion_step(motion: int, nm: int, speed: int) -> tuple[int, int]:
    """Per-frame (dy, dx) for motion id ``motion``: direction pi*m/nm."""
    theta = np.pi * motion / nm
    return int(round(speed * np.sin(theta))), int(round(speed * np.cos(theta)))


def triangle(k: np.ndarray, n: int) -> np.ndarray:
    """Integer triangle wave bouncing between -n and n, moving every step."""
    period = 4 * n
    p = np.mod(k, period)
    return np.where(p <= 2 * n, p - n, 3 * n - p)


def _overlap(a, b, margin=1) -> bool:
    return not (a[2] + margin <= b[0] or b[2] + margin <= a[0]
                or a[3] + margin <= b[1] or b[3] + margin <= a[1])


def _place(rng, na: int, moving: int, step, geo: Geometry):
    """Top-left corners for every patch; boxes (incl. the moving sweep) disjoint."""
    n_steps = geo.amplitude // geo.speed
    ry, rx = abs(step[0]) * n_steps, abs(step[1]) * n_steps
    for _ in range(10000):
        boxes, corners = [], []
        for a in range(na):
            my, mx = (ry, rx) if a == moving else (0, 0)
            hi_y = geo.size - geo.patch - my
            hi_x = geo.size - geo.patch - mx
            if hi_y < my or hi_x < mx:
                raise ValueError("frame too small for the requested motion")
            y = int(rng.integers(my, hi_y + 1))
            x = int(rng.integers(mx, hi_x + 1))
            box = (y - my, x - mx, y + geo.patch + my, x + geo.patch + mx)
            if any(_overlap(box, b) for b in boxes):
                break
            boxes.append(box)
            corners.append((y, x))
        else:
            return corners
    raise ValueError(f"could not place {na} patches in a {geo.size}px frame")


def render_video(rng: np.random.Generator, na: int, nm: int, texture: int, motion: int,
                 geo: Geometry):
    """Frames (n, H, W, 3) uint8, patch corners and the oscillation phase."""
    if na > len(PALETTE):
        raise ValueError(f"at most {len(PALETTE)} textures supported")
    step = motion_step(motion, nm, geo.speed)
    corners = _place(rng, na, texture, step, geo)
    n_steps = geo.amplitude // geo.speed
    phase = int(rng.integers(0, 4 * n_steps))
    bg = 0.5 + geo.background * rng.uniform(-1.0, 1.0, size=(geo.size, geo.size, 1))
    bg = np.repeat(bg, 3, axis=-1)
    tex = [PALETTE[a] + geo.contrast * (rng.uniform(size=(geo.patch, geo.patch, 1)) - 0.5)
           for a in range(na)]
    offs = triangle(phase + np.arange(geo.frames), n_steps)
    frames = np.empty((geo.frames, geo.size, geo.size, 3))
    p = geo.patch
    for k in range(geo.frames):
        img = bg.copy()
        for a, (y, x) in enumerate(corners):
            if a == texture:
                y, x = y + offs[k] * step[0], x + offs[k] * step[1]
            img[y:y + p, x:x + p] = tex[a]
        frames[k] = img
    frames = np.rint(np.clip(frames, 0.0, 1.0) * 255).astype(np.uint8)
    return frames, corners, phase


def parse_per_class(value) -> tuple[int, int, int]:
    """``n`` means n train, max(1, n//5) val, n//2 test; or an explicit triple."""
    if isinstance(value, str):
        parts = [int(p) for p in value.split(",")]
        value = parts[0] if len(parts) == 1 else tuple(parts)
    if isinstance(value, int):
        value = (value, max(1, value // 5), max(1, value // 2))
    value = tuple(int(v) for v in value)
    if len(value) != 3 or min(value) < 0:
        raise ValueError(f"per-class counts must be n or train,val,test; got {value}")
    return value


def _make_video(args):
    ss, na, nm, texture, motion, split, index, geo, with_flow = args
    rng = np.random.default_rng(ss)
    frames, corners, phase = render_video(rng, na, nm, texture, motion, geo)
    if with_flow:
        flow_q = quantize_flow(video_flows(frames, geo.block, geo.search_radius))
    else:
        flow_q = np.zeros((0,) + frames.shape[1:3] + (2,), dtype=np.uint8)
    return SynthVideo(frames, flow_q, class_label(texture, motion, nm), texture, motion,
                      split, index, corners, phase)


def generate_dataset(seed: int, na: int = 2, nm: int = 2, per_class=(50, 10, 25),
                     geometry: Geometry | None = None, threads: int = 1,
                     with_flow: bool = True) -> Dataset:
    """Class-balanced videos for every (texture, motion) pair in each split."""
    geo = geometry or Geometry()
    if na < 1 or nm < 1:
        raise ValueError("na and nm must be >= 1")
    counts = parse_per_class(per_class)
    jobs = []
    for split, n in zip(SPLITS, counts):
        for a in range(na):
            for m in range(nm):
                for _ in range(n):
                    jobs.append((split, a, m))
    seqs = np.random.SeedSequence(seed).spawn(len(jobs))
    args = [(ss, na, nm, a, m, split, i, geo, with_flow)
            for i, (ss, (split, a, m)) in enumerate(zip(seqs, jobs))]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            videos = list(ex.map(_make_video, args))
    else:
        videos = [_make_video(a) for a in args]
    return Dataset(videos, seed, na, nm, counts, geo)


# -- on-disk format ---------------------------------------------------------------


def save_dataset(ds: Dataset, out) -> Path:
    out = Path(out)
    vdir = out / "videos"
    vdir.mkdir(parents=True, exist_ok=True)
    names = []
    for v in ds.videos:
        name = f"{v.index:05d}_{v.split}"
        d = vdir / name
        d.mkdir(exist_ok=True)
        for k, frame in enumerate(v.frames):
            Image.fromarray(frame).save(d / f"frame_{k:03d}.png")
        save_tensor(d / "flow.tns", v.flow_q)
        meta = dict(v.meta(), generator=ds.params())
        (d / "video.json").write_text(json.dumps(meta, indent=1, sort_keys=True))
        names.append(name)
    manifest = dict(ds.params(), classes=ds.classes, videos=names, digest=ds.digest())
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out / "manifest.json"


def load_dataset(root) -> Dataset:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"{root} has no manifest.json")
    manifest = json.loads(mpath.read_text())
    geo = Geometry(**manifest["geometry"])
    videos = []
    for name in manifest["videos"]:
        d = root / "videos" / name
        meta = json.loads((d / "video.json").read_text())
        files = sorted(d.glob("frame_*.png"))
        frames = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
        flow_q = load_tensor(d / "flow.tns")
        videos.append(SynthVideo(frames, flow_q, meta["label"], meta["texture"], meta["motion"],
                                 meta["split"], meta["index"],
                                 [tuple(p) for p in meta["positions"]], meta["phase"]))
    ds = Dataset(videos, manifest["seed"], manifest["na"], manifest["nm"],
                 tuple(manifest["per_class"]), geo)
    if ds.digest() != manifest["digest"]:
        raise ValueError(f"{root}: content does not match the manifest digest")
    return ds


# -- clips and augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class CropRules:
    scale: float = 0.875        # base crop side relative to the frame
    jitter: float = 0.25        # independent +-jitter of width and height
    border: float = 0.25        # max gap between crop and each frame border
    flip_p: float = 0.5


@dataclass
class ClipSample:
    rgb: np.ndarray             # (T, h, w, 3), mean-subtracted in [-0.5, 0.5]
    flow: np.ndarray            # (T, h, w, 2L) in pixels of the output grid
    label: int
    start: int
    tau: int
    crop: tuple[int, int, int, int]   # (y0, x0, h, w) in source pixels
    flip: bool

    @property
    def chunk_starts(self) -> list[int]:
        return [self.start + k * self.tau for k in range(self.rgb.shape[0])]


def frames_required(T: int, tau: int, L: int) -> int:
    return (T - 1) * tau + L + 1


def crop_ok(crop, height: int, width: int, rules: CropRules) -> bool:
    y0, x0, h, w = crop
    inside = y0 >= 0 and x0 >= 0 and y0 + h <= height and x0 + w <= width
    gaps = (y0, height - y0 - h, x0, width - x0 - w)
    lim = (rules.border * height, rules.border * height, rules.border * width,
           rules.border * width)
    return inside and all(g <= l + 1e-9 for g, l in zip(gaps, lim))


def _axis_crop(rng, n: int, rules: CropRules) -> tuple[int, int]:
    base = rules.scale * n
    ext = int(round(base * (1.0 + rng.uniform(-rules.jitter, rules.jitter))))
    ext = min(n, max(int(np.ceil((1 - 2 * rules.border) * n)), ext))
    lo = max(0, int(np.ceil(n - rules.border * n - ext)))
    hi = min(n - ext, int(np.floor(rules.border * n)))
    if lo > hi:
        lo = hi = (n - ext) // 2
    return int(rng.integers(lo, hi + 1)), ext


def sample_crop(rng, height: int, width: int, rules: CropRules) -> tuple[int, int, int, int]:
    y0, h = _axis_crop(rng, height, rules)
    x0, w = _axis_crop(rng, width, rules)
    return y0, x0, h, w


def _linear_taps(start: int, extent: int, out: int, limit: int):
    """Source indices and weights for resampling [start, start+extent) onto ``out`` cells."""
    pos = np.clip(start + (np.arange(out) + 0.5) * extent / out - 0.5, start, start + extent - 1)
    assert pos.min() >= 0 and pos.max() <= limit - 1
    i0 = np.floor(pos).astype(np.int64)
    i1 = np.minimum(i0 + 1, limit - 1)
    return i0, i1, pos - i0


def _resample(stack: np.ndarray, crop, out: int) -> np.ndarray:
    """Bilinear rescale of a (T, H, W, C) stack's crop to (T, out, out, C).

    Sample positions are clamped to the crop, so no pixel outside it is read.
    """
    y0, x0, h, w = crop
    r0, r1, wy = _linear_taps(y0, h, out, stack.shape[1])
    c0, c1, wx = _linear_taps(x0, w, out, stack.shape[2])
    rows = stack[:, r0] * (1 - wy)[None, :, None, None] + stack[:, r1] * wy[None, :, None, None]
    return rows[:, :, c0] * (1 - wx)[None, None, :, None] + rows[:, :, c1] * wx[None, None, :, None]


def _assemble(video: SynthVideo, T: int, tau: int, L: int, start: int, crop, flip: bool,
              out: int, flows: np.ndarray | None = None) -> ClipSample:
    flows = video.flows() if flows is None else flows
    starts = [start + k * tau for k in range(T)]
    rgb = np.stack([video.frames[s + L // 2] for s in starts]).astype(np.float64) / 255.0 - 0.5
    flow = np.stack([build_flow_stack(flows, s, L) for s in starts])
    both = np.concatenate([rgb, flow], axis=-1)
    both = _resample(both, crop, out)
    rgb, flow = both[..., :3], both[..., 3:]
    y0, x0, h, w = crop
    flow[..., :L] *= out / w
    flow[..., L:] *= out / h
    if flip:
        rgb = rgb[:, :, ::-1].copy()
        flow = flip_flow_stack(flow)
    return ClipSample(rgb, flow, video.label, start, tau, tuple(crop), flip)


def _check_length(video: SynthVideo, T: int, tau_max: int, L: int) -> None:
    need = frames_required(T, tau_max, L)
    if video.num_frames < need:
        raise ValueError(f"video has {video.num_frames} frames; T={T}, tau={tau_max}, "
                         f"L={L} needs at least {need}")


def sample_training_clip(video: SynthVideo, T: int, tau_range: tuple[int, int], L: int,
                         rng: np.random.Generator, out_size: int,
                         rules: CropRules = CropRules(), flows=None) -> ClipSample:
    """Random start and stride; one crop, rescale and flip shared by all frames."""
    lo, hi = tau_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid tau range {tau_range}")
    _check_length(video, T, hi, L)
    tau = int(rng.integers(lo, hi + 1))
    start = int(rng.integers(0, video.num_frames - frames_required(T, tau, L) + 1))
    height, width = video.frames.shape[1:3]
    crop = sample_crop(rng, height, width, rules)
    assert crop_ok(crop, height, width, rules)
    flip = bool(rng.uniform() < rules.flip_p)
    return _assemble(video, T, tau, L, start, crop, flip, out_size, flows)


def evenly_spaced_starts(num_frames: int, T: int, tau: int, L: int, count: int) -> list[int]:
    """``count`` evenly spaced starts; a single clip sits in the middle."""
    last = num_frames - frames_required(T, tau, L)
    if count == 1:
        return [last // 2]
    return [int(round(i * last / (count - 1))) for i in range(count)]


def sample_test_clips(video: SynthVideo, T: int, count: int, flips: bool, tau: int, L: int,
                      out_size: int, flows=None) -> list[ClipSample]:
    """Full-frame clips at evenly spaced starts, each optionally followed by its mirror."""
    if count < 1:
        raise ValueError("count must be >= 1")
    _check_length(video, T, tau, L)
    flows = video.flows() if flows is None else flows
    height, width = video.frames.shape[1:3]
    crop = (0, 0, height, width)
    clips = []
    for s in evenly_spaced_starts(video.num_frames, T, tau, L, count):
        clips.append(_assemble(video, T, tau, L, s, crop, False, out_size, flows))
        if flips:
            clips.append(_assemble(video, T, tau, L, s, crop, True, out_size, flows))
    return clips
