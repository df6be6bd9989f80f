import shutil

import numpy as np
import pytest
from PIL import Image

from src.models import (
    ConfigError,
    CorruptSampleError,
    DatasetLayoutError,
    PreprocessConfig,
    SyntheticSpec,
)
from src.processors.mvtec import load_mvtec_category, split_train_val
from src.processors.synthetic import generate_synthetic_dataset, render_synthetic_images

NATIVE = PreprocessConfig(resize_edge=32, crop_size=32)


def test_split_train_val_is_seeded_and_disjoint():
    items = list(range(10))
    train, val = split_train_val(items, 0.8, seed=3)
    assert len(train) == 8
    assert sorted(train + val) == items
    assert train == sorted(train)
    assert split_train_val(items, 0.8, seed=3) == (train, val)


def test_split_train_val_keeps_one_training_item():
    train, val = split_train_val(["a"], 0.1, seed=0)
    assert train == ["a"]
    assert val == []


def test_load_mvtec_category(mvtec_root):
    split = load_mvtec_category(mvtec_root, "synthetic", NATIVE, split_ratio=0.8, num_workers=2)
    assert len(split.train) == 8
    assert len(split.val) == 2
    assert len(split.test) == 6

    anomalous = [s for s in split.test if s.is_anomalous]
    assert len(anomalous) == 3
    assert all(s.mask is not None and s.mask.sum() == 64 for s in anomalous)
    assert all(s.pixels.shape == (32, 32, 3) for s in split.test)


def test_load_mvtec_is_deterministic(mvtec_root):
    first = load_mvtec_category(mvtec_root, "synthetic", NATIVE)
    second = load_mvtec_category(mvtec_root, "synthetic", NATIVE)
    assert [s.path for s in first.train] == [s.path for s in second.train]
    assert np.array_equal(first.test[-1].pixels, second.test[-1].pixels)


def test_missing_category_raises(tmp_path):
    with pytest.raises(DatasetLayoutError):
        load_mvtec_category(tmp_path, "bottle", NATIVE)


def test_missing_mask_raises(mvtec_root):
    shutil.rmtree(mvtec_root / "synthetic" / "ground_truth" / "patch")
    (mvtec_root / "synthetic" / "ground_truth" / "patch").mkdir()
    with pytest.raises(DatasetLayoutError):
        load_mvtec_category(mvtec_root, "synthetic", NATIVE)


def test_mask_size_mismatch_raises(mvtec_root):
    mask_path = mvtec_root / "synthetic" / "ground_truth" / "patch" / "000_mask.png"
    Image.fromarray(np.zeros((16, 16), dtype=np.uint8)).save(mask_path)
    with pytest.raises(CorruptSampleError):
        load_mvtec_category(mvtec_root, "synthetic", NATIVE)


def test_empty_anomalous_mask_raises(mvtec_root):
    mask_path = mvtec_root / "synthetic" / "ground_truth" / "patch" / "000_mask.png"
    Image.fromarray(np.zeros((32, 32), dtype=np.uint8)).save(mask_path)
    with pytest.raises(CorruptSampleError, match="empty"):
        load_mvtec_category(mvtec_root, "synthetic", NATIVE)


def test_synthetic_dataset_is_deterministic(tiny_config):
    first = generate_synthetic_dataset(tiny_config.synthetic, tiny_config.preprocess)
    second = generate_synthetic_dataset(tiny_config.synthetic, tiny_config.preprocess)
    for a, b in zip(first.test, second.test, strict=True):
        assert np.array_equal(a.pixels, b.pixels)
        assert a.path == b.path


def test_synthetic_masks_cover_the_noise_patch(tiny_config):
    images = render_synthetic_images(tiny_config.synthetic)
    anomalous = [image for image in images if image.mask is not None]
    assert len(anomalous) == 3
    assert all(int(image.mask.sum()) == 64 for image in anomalous)

    split = generate_synthetic_dataset(tiny_config.synthetic, tiny_config.preprocess)
    assert split.category == "synthetic"
    assert all(not s.is_anomalous for s in (*split.train, *split.val))
    assert sum(s.is_anomalous for s in split.test) == 3


def test_blob_anomalies_are_inside_their_box():
    spec = SyntheticSpec(image_size=32, n_normal=2, n_test_anomalous=2, anomaly="blob", patch_size=9)
    for image in render_synthetic_images(spec):
        if image.mask is not None:
            rows, cols = np.nonzero(image.mask)
            assert 0 < image.mask.sum() < 81
            assert rows.max() - rows.min() < 9
            assert cols.max() - cols.min() < 9


def test_oversized_patch_raises():
    spec = SyntheticSpec(image_size=8, patch_size=12)
    with pytest.raises(ConfigError):
        render_synthetic_images(spec)
