import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from matl.boxlabels import BoxAnnotation, symmetric_squareness
from matl.data import (generate_synthetic, load_dataset, normalize_dataset, normalize_image, random_crop,
                       write_dataset)
from matl.errors import ConfigError, CropError, UsageError, ValidationError

from oracles import tight_box_scan


@pytest.fixture(scope="module")
def draw300():
    return generate_synthetic(100, 64, seed=0)


# -------------------------------------------------------------- synthetic

def test_counts_per_class():
    tiles = generate_synthetic(10, 32, seed=1)
    assert len(tiles) == 30
    assert np.bincount([t.class_label for t in tiles]).tolist() == [10, 10, 10]


def test_box_is_tight_box_of_mask(draw300):
    for t in draw300:
        assert t.box.as_list() == list(tight_box_scan(t.mask))
        assert t.image.shape == (64, 64, 3) and t.image.dtype == np.float32
        assert t.image.min() == 0.0 and t.image.max() == 1.0
        assert set(np.unique(t.mask)) <= {0, 1}
        # full object inside, with a margin
        assert t.box.x >= 1 and t.box.y >= 1 and t.box.x + t.box.w <= 63 and t.box.y + t.box.h <= 63


def test_square_vs_elongated_classes(draw300):
    ss = {c: np.mean([symmetric_squareness(t.box.w, t.box.h) for t in draw300 if t.class_label == c])
          for c in range(3)}
    assert ss[0] < ss[2]
    area = {c: np.mean([t.box.w * t.box.h for t in draw300 if t.class_label == c]) for c in range(3)}
    assert area[1] > area[0] and area[1] > area[2]


def test_generation_bit_deterministic():
    a, b = generate_synthetic(3, 32, seed=7), generate_synthetic(3, 32, seed=7)
    for x, y in zip(a, b):
        assert np.array_equal(x.image, y.image) and np.array_equal(x.mask, y.mask) and x.box == y.box
    c = generate_synthetic(3, 32, seed=8)
    assert not np.array_equal(a[0].image, c[0].image)


def test_generation_errors():
    with pytest.raises(UsageError):
        generate_synthetic(0)
    with pytest.raises(ConfigError):
        generate_synthetic(5, tile_size=8)


# ------------------------------------------------------------------ crops

def scene_with_box(size, x, y, w, h):
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[y:y + h, x:x + w] = 1
    img = np.random.default_rng(0).random((size, size, 3))
    return img, mask, BoxAnnotation(x, y, w, h)


def test_crop_forced_placement():
    img, mask, box = scene_with_box(40, 10, 12, 14, 6)
    tiles = [random_crop(img, mask, box, 16, seed=s) for s in range(20)]
    assert {t.box.x for t in tiles} == {1}
    assert {(t.box.w, t.box.h) for t in tiles} == {(14, 6)}
    assert all(np.array_equal(t.mask.any(axis=0), tiles[0].mask.any(axis=0)) for t in tiles)


def test_crop_mostly_off_center():
    img, mask, box = scene_with_box(64, 30, 30, 4, 4)
    off = 0
    for s in range(1000):
        t = random_crop(img, mask, box, 32, seed=s)
        off += (t.box.x + t.box.w / 2, t.box.y + t.box.h / 2) != (16, 16)
        assert 0 <= t.box.x and t.box.x + t.box.w <= 32 and 0 <= t.box.y and t.box.y + t.box.h <= 32
        assert t.box.as_list() == list(tight_box_scan(t.mask))
    assert off >= 900


def test_crop_too_large():
    img, mask, box = scene_with_box(40, 5, 5, 16, 4)
    with pytest.raises(CropError):
        random_crop(img, mask, box, 17)


def test_crop_deterministic():
    img, mask, box = scene_with_box(64, 20, 25, 9, 5)
    a, b = random_crop(img, mask, box, 32, seed=3), random_crop(img, mask, box, 32, seed=3)
    assert a.box == b.box and np.array_equal(a.image, b.image)


# ---------------------------------------------------------- normalization

def test_normalize_examples():
    x = np.arange(256, dtype=float).reshape(16, 16, 1).repeat(3, axis=2)
    y = normalize_image(x)
    assert y.min() == 0.0 and y.max() == 1.0
    assert not normalize_image(np.full((4, 4, 3), 7.0)).any()
    with pytest.raises(UsageError):
        normalize_image(np.zeros((0, 3)))


@settings(max_examples=50)
@given(hnp.arrays(np.float64, (5, 5, 3), elements=st.floats(-100, 100)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_normalize_affine_invariant(x, a, b):
    # the value range must survive the affine map at float64 resolution
    assume(np.ptp(x) > 1e-6 * max(1.0, np.abs(x).max(), abs(b) / a))
    np.testing.assert_allclose(normalize_image(a * x + b), normalize_image(x), atol=1e-4)


def test_normalize_dataset_shared_range():
    out = normalize_dataset([np.zeros((2, 2, 3)), np.full((2, 2, 3), 4.0)])
    assert out[0].max() == 0.0 and out[1].min() == 1.0


# ------------------------------------------------------------- on disk

def write_rgb(path, arr):
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)


def make_manifest(root, entries, size=16):
    for e in entries:
        write_rgb(root / e["image"], np.random.default_rng(1).integers(0, 255, (size, size, 3)))
    (root / "manifest.json").write_text(json.dumps(entries))


def test_load_three_samples(tmp_path):
    entries = [{"image": f"img{i}.png", "class": i, "box": [1, 2, 5, 4]} for i in range(3)]
    make_manifest(tmp_path, entries)
    tiles = load_dataset(tmp_path)
    assert len(tiles) == 3 and [t.class_label for t in tiles] == [0, 1, 2]
    expected = np.zeros((16, 16), dtype=np.uint8)
    expected[2:6, 1:6] = 1
    assert np.array_equal(tiles[0].mask, expected)


@pytest.mark.parametrize("box,match", [([1, 1, 0, 3], "nonpositive"), ([10, 1, 8, 3], "outside"),
                                       ([1, 1, 3], "box must be")])
def test_load_rejects_bad_boxes(tmp_path, box, match):
    make_manifest(tmp_path, [{"image": "a.png", "class": 0, "box": [1, 1, 2, 2]},
                             {"image": "b.png", "class": 1, "box": box}])
    with pytest.raises(ValidationError, match=f"sample 1.*{match}|{match}"):
        load_dataset(tmp_path)


def test_load_malformed_manifest(tmp_path):
    (tmp_path / "manifest.json").write_text('[{"image": "a.png",\n "class": }]')
    with pytest.raises(ValidationError, match="line 2"):
        load_dataset(tmp_path)


def test_load_unknown_key(tmp_path):
    make_manifest(tmp_path, [{"image": "a.png", "class": 0, "box": [1, 1, 2, 2], "label": 3}])
    with pytest.raises(ValidationError, match="sample 0.*unknown"):
        load_dataset(tmp_path)


def test_load_mask_box_mismatch(tmp_path):
    make_manifest(tmp_path, [{"image": "a.png", "class": 0, "box": [1, 1, 2, 2], "mask": "m.png"}])
    m = np.zeros((16, 16), dtype=np.uint8)
    m[1:4, 1:3] = 255
    Image.fromarray(m, mode="L").save(tmp_path / "m.png")
    with pytest.raises(ValidationError, match="tight box"):
        load_dataset(tmp_path)


def test_write_load_roundtrip(tmp_path):
    tiles = generate_synthetic(2, 32, seed=4)
    write_dataset(tiles, tmp_path)
    back = load_dataset(tmp_path)
    assert len(back) == len(tiles)
    for a, b in zip(tiles, back):
        assert a.box == b.box and a.class_label == b.class_label
        assert np.array_equal(a.mask, b.mask)
        assert np.abs(a.image - b.image).max() <= 1 / 255 + 1e-6  # 8-bit quantization, renormalized
