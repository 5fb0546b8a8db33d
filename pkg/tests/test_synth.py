import numpy as np
import pytest

from twostream.flow import build_flow_stack, flip_flow_stack
from twostream.synth import (CropRules, Geometry, class_label, crop_ok, evenly_spaced_starts,
                             frames_required, generate_dataset, load_dataset, motion_step,
                             parse_per_class, sample_crop, sample_test_clips,
                             sample_training_clip, save_dataset, triangle)

SMALL = Geometry(frames=12)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(5, 2, 2, (3, 1, 2), SMALL)


def test_class_count_and_labels(ds):
    assert ds.classes == 4
    for v in ds.videos:
        assert v.label == class_label(v.texture, v.motion, 2)
    assert sorted({v.label for v in ds.videos}) == [0, 1, 2, 3]


def test_splits_disjoint_and_balanced(ds):
    idx = {s: {v.index for v in ds.split(s)} for s in ("train", "val", "test")}
    assert not (idx["train"] & idx["val"]) and not (idx["train"] & idx["test"])
    assert [len(ds.split(s)) for s in ("train", "val", "test")] == [12, 4, 8]


def test_deterministic_under_seed(ds):
    again = generate_dataset(5, 2, 2, (3, 1, 2), SMALL)
    assert again.digest() == ds.digest()
    threaded = generate_dataset(5, 2, 2, (3, 1, 2), SMALL, threads=2)
    assert threaded.digest() == ds.digest()
    assert generate_dataset(6, 2, 2, (3, 1, 2), SMALL).digest() != ds.digest()


def test_only_the_labelled_texture_moves(ds):
    for v in ds.videos[:6]:
        moving = np.any(v.frames != v.frames[0], axis=(0, 3))
        ys, xs = np.nonzero(moving)
        p = SMALL.patch
        cy, cx = v.positions[v.texture]
        dy, dx = motion_step(v.motion, 2, SMALL.speed)
        reach = SMALL.amplitude
        assert ys.min() >= cy - reach * abs(np.sign(dy)) and ys.max() < cy + p + reach * abs(np.sign(dy))
        assert xs.min() >= cx - reach * abs(np.sign(dx)) and xs.max() < cx + p + reach * abs(np.sign(dx))


def test_every_frame_shows_every_texture(ds):
    v = ds.videos[0]
    for a, (y, x) in enumerate(v.positions):
        if a != v.texture:
            patch = v.frames[:, y:y + SMALL.patch, x:x + SMALL.patch]
            assert np.all(patch == patch[0])


def test_texture_marginal_uniform_per_motion():
    big = generate_dataset(2, 2, 2, (2500, 0, 0), Geometry(frames=2), with_flow=False)
    assert len(big.videos) == 10_000
    tex = np.array([v.texture for v in big.videos])
    mot = np.array([v.motion for v in big.videos])
    for m in range(2):
        freq = np.bincount(tex[mot == m], minlength=2) / np.sum(mot == m)
        assert np.all(np.abs(freq - 0.5) <= 0.02)


def test_triangle_wave():
    k = np.arange(9)
    assert triangle(k, 2).tolist() == [-2, -1, 0, 1, 2, 1, 0, -1, -2]


def test_motion_directions():
    assert motion_step(0, 2, 2) == (0, 2)
    assert motion_step(1, 2, 2) == (2, 0)


def test_geometry_validation():
    with pytest.raises(ValueError):
        Geometry(speed=5, amplitude=4)
    with pytest.raises(ValueError):
        Geometry(speed=4, amplitude=4, search_radius=3)


def test_parse_per_class():
    assert parse_per_class(50) == (50, 10, 25)
    assert parse_per_class("4,1,2") == (4, 1, 2)
    assert parse_per_class("1") == (1, 1, 1)
    with pytest.raises(ValueError):
        parse_per_class("1,2")


def test_save_load_roundtrip(ds, tmp_path):
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.digest() == ds.digest()
    np.testing.assert_array_equal(back.videos[3].flow_q, ds.videos[3].flow_q)


def test_load_detects_tampering(ds, tmp_path):
    save_dataset(ds, tmp_path / "d")
    victim = sorted((tmp_path / "d" / "videos").iterdir())[0] / "frame_000.png"
    from PIL import Image
    img = np.asarray(Image.open(victim)).copy()
    img[0, 0, 0] ^= 1
    Image.fromarray(img).save(victim)
    with pytest.raises(ValueError, match="digest"):
        load_dataset(tmp_path / "d")


def test_missing_dir(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)


# -- crops and clips ---------------------------------------------------------------


def test_crop_rules_over_10k_draws():
    rng = np.random.default_rng(0)
    rules = CropRules()
    for n in range(10_000):
        h, w = (32, 32) if n % 2 else (24, 40)
        y0, x0, ch, cw = crop = sample_crop(rng, h, w, rules)
        assert crop_ok(crop, h, w, rules)
        for ext, side in ((ch, h), (cw, w)):
            base = rules.scale * side
            assert abs(ext - base) <= rules.jitter * base + 0.5
        # centre within 25% of each border
        cy, cx = y0 + ch / 2, x0 + cw / 2
        assert 0.25 * h <= cy <= 0.75 * h and 0.25 * w <= cx <= 0.75 * w


def test_crop_ok_rejects_outside():
    r = CropRules()
    assert not crop_ok((-1, 0, 10, 10), 12, 12, r)
    assert not crop_ok((0, 0, 4, 4), 32, 32, r)


def test_single_chunk_clip(ds):
    v = ds.split("train")[0]
    c = sample_training_clip(v, 1, (1, 1), 3, np.random.default_rng(0), 24)
    assert c.rgb.shape == (1, 24, 24, 3) and c.flow.shape == (1, 24, 24, 6)
    assert c.tau == 1 and c.chunk_starts == [c.start]


def test_training_clip_shares_transform(ds):
    v = ds.split("train")[1]
    a = sample_training_clip(v, 3, (1, 2), 3, np.random.default_rng(4), 24,
                             CropRules(flip_p=0.0))
    b = sample_training_clip(v, 3, (1, 2), 3, np.random.default_rng(4), 24,
                             CropRules(flip_p=1.0))
    assert (a.start, a.tau, a.crop) == (b.start, b.tau, b.crop)
    assert not a.flip and b.flip
    np.testing.assert_array_equal(b.rgb, a.rgb[:, :, ::-1])
    np.testing.assert_array_equal(b.flow, flip_flow_stack(a.flow))


def test_full_frame_clip_keeps_flow_values(ds):
    v = ds.split("test")[0]
    clip = sample_test_clips(v, 2, 1, False, 1, 3, SMALL.size)[0]
    want = build_flow_stack(v.flows(), clip.start, 3)
    np.testing.assert_allclose(clip.flow[0], want, atol=1e-12)
    np.testing.assert_allclose(clip.rgb[0], v.frames[clip.start + 1] / 255.0 - 0.5, atol=1e-12)


def test_rescaled_flow_is_in_output_pixels(ds):
    v = ds.split("test")[0]
    clip = sample_test_clips(v, 1, 1, False, 1, 2, SMALL.size // 2)[0]
    full = sample_test_clips(v, 1, 1, False, 1, 2, SMALL.size)[0]
    # halving the frame halves displacements; check on the mean over the frame
    assert clip.flow.mean() == pytest.approx(0.5 * full.flow.mean(), abs=0.05)


def test_too_short_video_reports_minimum(ds):
    v = ds.videos[0]
    need = frames_required(5, 3, 3)
    with pytest.raises(ValueError, match=f"at least {need}"):
        sample_training_clip(v, 5, (1, 3), 3, np.random.default_rng(0), 24)


def test_test_clip_counts(ds):
    v = ds.split("test")[0]
    assert len(sample_test_clips(v, 2, 1, False, 1, 3, 24)) == 1
    clips = sample_test_clips(v, 2, 10, True, 1, 3, 24)
    assert len(clips) == 20
    assert [c.flip for c in clips[:4]] == [False, True, False, True]


def test_test_start_spacing():
    # 40 frames, T=5, tau=2, L=3: last start = 40 - (4*2 + 3 + 1) = 28
    assert evenly_spaced_starts(40, 5, 2, 3, 5) == [0, 7, 14, 21, 28]
    assert evenly_spaced_starts(40, 5, 2, 3, 1) == [14]
    assert evenly_spaced_starts(40, 5, 2, 3, 2) == [0, 28]


def test_clip_sampling_deterministic(ds):
    v = ds.split("train")[2]
    a = sample_training_clip(v, 2, (1, 3), 3, np.random.default_rng(9), 24)
    b = sample_training_clip(v, 2, (1, 3), 3, np.random.default_rng(9), 24)
    assert a.rgb.tobytes() == b.rgb.tobytes() and a.flow.tobytes() == b.flow.tobytes()
