import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from mobilexnet import data as D
from mobilexnet.data import (AugmentConfig, DataError, DepthSample, ManifestEntry, Recipe,
                             augment, batch_iter, load_sample, preprocess, read_manifest)


def make_sample(h=24, w=32, seed=0, depth=None):
    rng = np.random.default_rng(seed)
    rgb = rng.integers(0, 256, (h, w, 3), dtype=np.uint8)
    d = rng.uniform(1, 10, (h, w)).astype(np.float32) if depth is None else np.full((h, w), depth, np.float32)
    valid = np.ones((h, w), bool)
    return DepthSample(rgb, d, valid)


def write_pair(tmp_path, raw, rgb=None, name="a"):
    h, w = raw.shape
    rgb = np.zeros((h, w, 3), np.uint8) if rgb is None else rgb
    Image.fromarray(rgb).save(tmp_path / f"{name}_rgb.png")
    Image.fromarray(raw.astype(np.uint16)).save(tmp_path / f"{name}_d.png")
    return ManifestEntry(str(tmp_path / f"{name}_rgb.png"), str(tmp_path / f"{name}_d.png"), 256.0)


# -- loading ---------------------------------------------------------------------------

def test_load_sample_divides_and_masks(tmp_path):
    raw = np.array([[25600, 0], [256, 512]])
    s = load_sample(write_pair(tmp_path, raw))
    assert s.depth_m[0, 0] == 100.0
    assert not s.valid[0, 1] and s.valid[1, 0]
    assert s.depth_m[1, 1] == 2.0


def test_depth_png_round_trip_within_quantisation(tmp_path):
    rng = np.random.default_rng(0)
    depth = rng.uniform(0.5, 80, (10, 12))
    div = 256.0
    D.save_depth_png(tmp_path / "d.png", depth, div)
    Image.fromarray(np.zeros((10, 12, 3), np.uint8)).save(tmp_path / "r.png")
    s = load_sample(ManifestEntry(str(tmp_path / "r.png"), str(tmp_path / "d.png"), div))
    assert np.abs(s.depth_m - depth).max() <= 0.5 / div + 1e-6


def test_size_mismatch_and_decode_errors(tmp_path):
    Image.fromarray(np.zeros((4, 5, 3), np.uint8)).save(tmp_path / "r.png")
    Image.fromarray(np.zeros((4, 6), np.uint16)).save(tmp_path / "d.png")
    with pytest.raises(DataError):
        load_sample(ManifestEntry(str(tmp_path / "r.png"), str(tmp_path / "d.png"), 1.0))
    (tmp_path / "bad.png").write_bytes(b"not a png")
    with pytest.raises(DataError):
        load_sample(ManifestEntry(str(tmp_path / "r.png"), str(tmp_path / "bad.png"), 1.0))


def test_sample_invariants_enforced():
    with pytest.raises(DataError):
        DepthSample(np.zeros((2, 2, 3)), np.zeros((2, 3)), np.zeros((2, 2), bool))


def test_manifest_parsing(tmp_path):
    write_pair(tmp_path, np.ones((4, 4)), name="a")
    (tmp_path / "m.tsv").write_text("#recipe center_crop 2 2\na_rgb.png\ta_d.png\t1000\n")
    m = read_manifest(tmp_path / "m.tsv")
    assert m.recipe == Recipe("center_crop", 2, 2) and len(m) == 1
    assert m[0].hw == (2, 2)


@pytest.mark.parametrize("body,msg", [
    ("a_rgb.png\ta_d.png\n", ":2:"),
    ("a_rgb.png\ta_d.png\t-1\n", ":2:"),
    ("a_rgb.png\tmissing.png\t1\n", ":2:"),
    ("", "no samples"),
])
def test_manifest_errors_carry_line_numbers(tmp_path, body, msg):
    write_pair(tmp_path, np.ones((4, 4)), name="a")
    (tmp_path / "m.tsv").write_text("#recipe none 0 0\n" + body)
    with pytest.raises(DataError, match=msg):
        read_manifest(tmp_path / "m.tsv")


def test_write_dataset_round_trip(tmp_path):
    samples = D.synthetic_planes(3, 8, 8)
    m = read_manifest(D.write_dataset(samples, tmp_path))
    for a, b in zip(samples, (m[i] for i in range(3))):
        assert np.array_equal(a.rgb, b.rgb)
        assert np.abs(a.depth_m - b.depth_m).max() <= 0.5e-3 + 1e-7


# -- preprocessing ------------------------------------------------------------------

def test_nyu_recipe_shape():
    s = preprocess(make_sample(480, 640), Recipe("half_center_crop", 228, 304))
    assert s.hw == (228, 304) and s.rgb.shape == (228, 304, 3)


def test_bottom_crop_rows():
    h, w = 375, 1241
    rows = np.repeat(np.arange(h, dtype=np.float32)[:, None], w, axis=1)
    s = DepthSample(np.zeros((h, w, 3), np.uint8), rows + 1, np.ones((h, w), bool))
    out = preprocess(s, Recipe("bottom_crop", 228, 912))
    assert out.hw == (228, 912)
    assert out.depth_m[0, 0] == 148 and out.depth_m[-1, 0] == 375  # rows [147, 375)


def test_none_recipe_is_identity_and_oversized_crop_errors():
    s = make_sample()
    assert preprocess(s, Recipe()) is s
    with pytest.raises(DataError):
        preprocess(s, Recipe("center_crop", 100, 10))
    with pytest.raises(DataError):
        Recipe("stretch")


def test_half_resize_depth_is_nearest_not_interpolated():
    s = make_sample(8, 8)
    s.depth_m[:] = np.where(np.arange(8)[None, :] < 4, 1.0, 9.0)
    out = D.resize_sample(s, 4, 4)
    assert set(np.unique(out.depth_m)) <= {1.0, 9.0}


# -- augmentation ---------------------------------------------------------------------

def test_degenerate_config_is_identity():
    s = make_sample()
    out = augment(s, AugmentConfig.identity(), np.random.default_rng(0))
    assert np.array_equal(out.rgb, s.rgb) and np.array_equal(out.depth_m, s.depth_m)
    assert np.array_equal(out.valid, s.valid)


def test_scale_divides_depth():
    s = make_sample(depth=10.0)
    cfg = AugmentConfig((0, 0), (1.5, 1.5), (1, 1), 0.0)
    out = augment(s, cfg, np.random.default_rng(0))
    assert np.all(out.depth_m == np.float32(10.0) / np.float32(1.5))
    assert abs(out.depth_m[0, 0] - 6.667) < 1e-3


def test_flip_is_an_involution():
    s = make_sample()
    cfg = AugmentConfig((0, 0), (1, 1), (1, 1), 1.0)
    twice = augment(augment(s, cfg, np.random.default_rng(0)), cfg, np.random.default_rng(1))
    assert np.array_equal(twice.rgb, s.rgb) and np.array_equal(twice.depth_m, s.depth_m)


def test_rotation_invalidates_corners():
    s = make_sample(32, 32)
    out = D.rotate(s, 5.0)
    assert not out.valid[0, 0] and not out.valid[-1, -1]
    assert out.valid[16, 16]
    assert (out.depth_m[~out.valid] == 0).all()


def test_jitter_clamps():
    rgb = np.full((2, 2, 3), 250, np.uint8)
    assert D.color_jitter(rgb, 1.4, 1.4, 1.4).max() == 255
    assert D.color_jitter(rgb, 1.0, 1.0, 1.0).tolist() == rgb.tolist()


def test_augment_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(scale=(0.5, 1.0))
    with pytest.raises(ValueError):
        AugmentConfig(flip_prob=1.5)


def marker_sample(seed):
    rng = np.random.default_rng(seed)
    h, w = 40, 48
    rgb = np.full((h, w, 3), 128, np.uint8)
    depth = np.full((h, w), 2.0, np.float32)
    valid = np.ones((h, w), bool)
    y, x = rng.integers(12, 24), rng.integers(12, 32)
    rgb[y:y + 5, x:x + 5] = (255, 0, 0)
    depth[y:y + 5, x:x + 5] = 7.0
    # the hole sits in the top rows, clear of the marker by at least 5 px
    y2, x2 = rng.integers(0, 4), rng.integers(0, 40)
    rgb[y2:y2 + 4, x2:x2 + 4] = (0, 0, 255)
    valid[y2:y2 + 4, x2:x2 + 4] = False
    depth[~valid] = 0
    return DepthSample(rgb, depth, valid)


def check_lockstep(src, out, s_factor):
    r, g, b = (out.rgb[..., i].astype(int) for i in range(3))
    marker = out.valid & np.isclose(out.depth_m, 7.0 / s_factor, rtol=1e-6)
    # marker depth travels with marker colour
    assert (r[marker] > b[marker] + 20).all()
    # every invalid pixel is either the blue hole or rotated-out canvas (grey/black)
    bad = ~out.valid
    hole = b > r + 20
    canvas = (r == g) & (g == b)
    assert (hole | canvas)[bad].all()
    assert out.depth_m[bad].max(initial=0) == 0


@pytest.mark.parametrize("seed", range(20))
def test_lockstep_marker(seed):
    src = marker_sample(seed)
    rng = np.random.default_rng(seed)
    cfg = AugmentConfig(seed=seed)
    angle, s = rng.uniform(-5, 5), rng.uniform(1, 1.5)
    out = D.rotate_and_zoom(src, angle, s)
    check_lockstep(src, out, s)
    out = augment(src, cfg, D.sample_rng(seed, 0, 0))
    assert out.hw == src.hw


@given(st.integers(0, 10 ** 6))
def test_augment_never_validates_invalid(seed):
    src = make_sample(16, 16, seed)
    src.valid[:] = False
    src.depth_m[:] = 0
    out = augment(src, AugmentConfig(), np.random.default_rng(seed))
    assert not out.valid.any()


@given(st.integers(0, 10 ** 6))
def test_augment_is_deterministic(seed):
    src = make_sample(16, 16, 3)
    a = augment(src, AugmentConfig(), np.random.default_rng(seed))
    b = augment(src, AugmentConfig(), np.random.default_rng(seed))
    assert np.array_equal(a.rgb, b.rgb) and np.array_equal(a.depth_m, b.depth_m)


# -- batching ------------------------------------------------------------------------------

def test_batch_sizes_and_normalisation():
    ds = D.synthetic_planes(20, 8, 8)
    batches = list(batch_iter(ds, 8, shuffle_seed=1))
    assert [b[0].shape[0] for b in batches] == [8, 8, 4]
    rgb, depth, mask = batches[0]
    assert rgb.shape == (8, 3, 8, 8) and depth.shape == (8, 1, 8, 8) and mask.dtype == bool
    assert 0 <= rgb.min() and rgb.max() <= 1


def test_same_seed_same_order_different_epoch_differs():
    order = lambda s, e: D.epoch_order(20, s, e)
    assert np.array_equal(order(3, 0), order(3, 0))
    assert not np.array_equal(order(3, 0), order(3, 1))
    assert sorted(order(3, 0)) == list(range(20))


def test_batch_stream_replays_bit_identically():
    ds = D.synthetic_planes(6, 16, 16)
    cfg = AugmentConfig(seed=5)
    a = [tuple(x.tobytes() for x in b) for b in batch_iter(ds, 4, 9, 2, cfg)]
    b = [tuple(x.tobytes() for x in b) for b in batch_iter(ds, 4, 9, 2, cfg)]
    assert a == b


def test_empty_dataset_errors():
    with pytest.raises(DataError):
        next(batch_iter([], 8))


def test_rotation_masks_reach_the_loss():
    ds = D.synthetic_planes(4, 24, 24)
    cfg = AugmentConfig((5, 5), (1, 1), (1, 1), 0.0)
    rgb, depth, mask = next(batch_iter(ds, 4, 0, 0, cfg, shuffle=False))
    before = 4 * 24 * 24
    lost = before - int(mask.sum())
    # a 5 degree rotation of a 24x24 square cuts off its corners
    assert lost > 0
    assert (depth[~mask] == 0).all()
    from mobilexnet.loss import l1
    from mobilexnet.tensor import Tensor
    pred = depth.copy()
    pred[~mask] = 1e6  # garbage where invalid must not matter
    assert l1(Tensor(pred), depth, mask).item() == 0
