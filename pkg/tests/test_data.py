import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from fadiff.data import (CONSTANT_LEVEL, DEFAULT_CLASSES, DatasetError, DatasetSpec,
                         GENERATORS, export_dataset, from_uint8, h_stripes, load_image_folder,
                         read_png, split_tags, synth_dataset, synth_image, to_uint8, write_png)


def test_h_stripes_formula():
    img = h_stripes(8, frequency=2.0, phase=0.0, amplitude=0.5)
    for r in range(8):
        expected = 0.5 * np.sin(2 * np.pi * 2.0 * r / 8)
        assert np.allclose(img[r], expected, atol=1e-12)
    assert np.allclose(img[0], 0.0) and np.allclose(img[1], 0.5)


def test_constant_class_without_jitter():
    spec = DatasetSpec(jitter=0.0, image_size=8)
    img = synth_image(spec, "constant", 3)
    assert np.all(img == np.float32(CONSTANT_LEVEL))


def test_generator_registry_and_class_order():
    assert len(GENERATORS) == 8
    assert list(DEFAULT_CLASSES) == sorted(DEFAULT_CLASSES)
    assert DEFAULT_CLASSES.index("constant") == 2


def test_synth_is_deterministic_and_seeded():
    spec = DatasetSpec(samples_per_class=4, image_size=16, seed=5)
    a, b = synth_dataset(spec), synth_dataset(spec)
    assert np.array_equal(a.images, b.images)
    c = synth_dataset(DatasetSpec(samples_per_class=4, image_size=16, seed=6))
    assert not np.array_equal(a.images, c.images)


def test_synth_dataset_layout():
    ds = synth_dataset(DatasetSpec(samples_per_class=10, image_size=16))
    assert ds.images.shape == (80, 1, 16, 16) and ds.images.dtype == np.float32
    assert ds.images.min() >= -1 and ds.images.max() <= 1
    assert ds.class_counts().tolist() == [10] * 8
    assert ds.empty_class_ids() == [2]
    assert (ds.splits == "val").sum() == 8
    assert ds.subset("train").class_counts().tolist() == [9] * 8


def test_classes_are_distinguishable_by_nearest_mean():
    ds = synth_dataset(DatasetSpec(samples_per_class=30, image_size=16, jitter=0.0))
    # Without jitter every class except blob-noise is a single image.
    for c in range(8):
        imgs = ds.images[ds.labels == c]
        if ds.class_names[c] != "blob-noise":
            assert np.allclose(imgs, imgs[0])


@pytest.mark.parametrize("n,expected", [(10, 1), (200, 20), (2, 1), (3, 1)])
def test_split_tags(n, expected):
    tags = split_tags(n)
    assert (tags == "val").sum() == expected
    assert (tags == "train").sum() == n - expected
    assert list(tags[: n - expected]) == ["train"] * (n - expected)


def test_spec_validation():
    with pytest.raises(DatasetError):
        DatasetSpec(num_classes=9).validate()
    with pytest.raises(DatasetError):
        DatasetSpec(classes=("h-stripes", "nope"), num_classes=2).validate()
    with pytest.raises(DatasetError):
        DatasetSpec(samples_per_class=1).validate()
    with pytest.raises(DatasetError):
        DatasetSpec(jitter=1.5).validate()


def test_uint8_mapping_examples():
    assert to_uint8(np.array([-1.0, 1.0, 0.0])).tolist() == [0, 255, 128]
    # x = 0 is the only exact tie (127.5); nearby values round to nearest.
    assert to_uint8(np.array([np.nextafter(0.0, -1.0), np.nextafter(0.0, 1.0)])).tolist() == [128, 128]
    assert to_uint8(np.array([-0.004, 0.004])).tolist() == [127, 128]
    assert to_uint8(np.array([-3.0, 3.0])).tolist() == [0, 255]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 255), min_size=1, max_size=64))
def test_uint8_round_trip(values):
    arr = np.asarray(values, dtype=np.uint8)
    assert np.array_equal(to_uint8(from_uint8(arr)), arr)


def test_png_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(-1, 1, (1, 12, 12)).astype(np.float32)
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert np.array_equal(to_uint8(back), to_uint8(img[0]))
    assert np.abs(back - img[0]).max() <= 1 / 127.5 + 1e-6


def test_colour_png_uses_luma(tmp_path):
    rgb = np.zeros((4, 4, 3), dtype=np.uint8)
    rgb[..., 0] = 200
    rgb[..., 1] = 100
    rgb[..., 2] = 50
    Image.fromarray(rgb, "RGB").save(tmp_path / "c.png")
    luma = 0.299 * 200 + 0.587 * 100 + 0.114 * 50
    np.testing.assert_allclose(read_png(tmp_path / "c.png"), luma * 2 / 255 - 1, atol=1e-6)


def test_unreadable_png_names_the_file(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(DatasetError, match="bad.png"):
        read_png(bad)


def test_export_and_reload(tmp_path):
    spec = DatasetSpec(samples_per_class=5, image_size=16, seed=2)
    ds = synth_dataset(spec)
    root = export_dataset(ds, tmp_path / "d", spec)
    manifest = json.loads((root / "dataset.json").read_text())
    assert manifest["class_names"] == ds.class_names
    assert (root / "checker" / "checker_00004.png").exists()
    back = load_image_folder(root)
    assert back.class_names == ds.class_names
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.splits, ds.splits)
    assert np.array_equal(to_uint8(back.images), to_uint8(ds.images))


def test_export_requires_parent(tmp_path):
    ds = synth_dataset(DatasetSpec(samples_per_class=2, image_size=8))
    with pytest.raises(DatasetError):
        export_dataset(ds, tmp_path / "missing" / "d")


def test_folder_errors(tmp_path):
    with pytest.raises(DatasetError):
        load_image_folder(tmp_path / "nope")
    (tmp_path / "a").mkdir()
    with pytest.raises(DatasetError, match="no PNG"):
        load_image_folder(tmp_path)
    write_png(tmp_path / "a" / "x.png", np.zeros((8, 8)))
    (tmp_path / "b").mkdir()
    write_png(tmp_path / "b" / "y.png", np.zeros((9, 9)))
    with pytest.raises(DatasetError, match="mixed sizes"):
        load_image_folder(tmp_path)


def test_folder_without_manifest_sorts_classes(tmp_path):
    for name in ["zeta", "alpha"]:
        (tmp_path / name).mkdir()
        for i in range(3):
            write_png(tmp_path / name / f"{i}.png", np.full((8, 8), 0.5 if name == "zeta" else -0.5))
    ds = load_image_folder(tmp_path)
    assert ds.class_names == ["alpha", "zeta"]
    assert ds.labels.tolist() == [0, 0, 0, 1, 1, 1]
    assert ds.images[0].mean() < 0 < ds.images[-1].mean()
