import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from src.config import (
    IMAGE_EXTENSIONS,
    MVTEC_GOOD_DIR,
    MVTEC_GROUND_TRUTH_DIR,
    MVTEC_MASK_SUFFIX,
    MVTEC_TEST_DIR,
    MVTEC_TRAIN_DIR,
)
from src.models import (
    CorruptSampleError,
    DatasetLayoutError,
    DatasetSplit,
    ImageSample,
    PreprocessConfig,
)
from src.processors.image_processor import ImageProcessor

logger = logging.getLogger(__name__)


def load_mvtec_category(
    root_path: str | Path,
    category: str,
    config: PreprocessConfig,
    split_ratio: float = 0.8,
    seed: int = 0,
    num_workers: int = 4,
) -> DatasetSplit:
    """
    Load one category of an MVTec-AD-layout dataset.

    `train/good` is split into train/val at file granularity with a seeded
    permutation of the sorted file list. Test images under `test/good` are normal;
    every other defect directory is paired with `ground_truth/<defect>/<stem>_mask.png`.

    Raises:
        DatasetLayoutError: If a required directory or mask file is missing.
        CorruptSampleError: If an image and its mask differ in size, or an
            anomalous mask has no positive pixel after cropping.
    """
    category_dir = Path(root_path) / category
    train_dir = category_dir / MVTEC_TRAIN_DIR / MVTEC_GOOD_DIR
    test_dir = category_dir / MVTEC_TEST_DIR
    gt_dir = category_dir / MVTEC_GROUND_TRUTH_DIR
    for required in (category_dir, train_dir, test_dir, gt_dir):
        if not required.is_dir():
            raise DatasetLayoutError(f"Missing directory: {required}")

    train_paths = _list_images(train_dir)
    if not train_paths:
        raise DatasetLayoutError(f"No training images under {train_dir}")

    def load_normal(path: Path) -> ImageSample:
        pixels = ImageProcessor.preprocess_image(ImageProcessor.read_image(path), config)
        return ImageSample(pixels=pixels, label="normal", category=category, path=str(path))

    def load_test(item: tuple[Path, str]) -> ImageSample:
        path, defect = item
        if defect == MVTEC_GOOD_DIR:
            return load_normal(path)
        mask_path = gt_dir / defect / f"{path.stem}{MVTEC_MASK_SUFFIX}.png"
        if not mask_path.is_file():
            raise DatasetLayoutError(f"Missing ground-truth mask: {mask_path}")
        raw = ImageProcessor.read_image(path)
        raw_mask = ImageProcessor.read_mask(mask_path)
        if raw.shape[:2] != raw_mask.shape[:2]:
            raise CorruptSampleError(
                f"Image {path} is {raw.shape[:2]} but mask {mask_path} is {raw_mask.shape[:2]}"
            )
        mask = ImageProcessor.preprocess_mask(raw_mask, config)
        if not mask.any():
            raise CorruptSampleError(f"Mask of anomalous sample {path} is empty after cropping")
        return ImageSample(
            pixels=ImageProcessor.preprocess_image(raw, config),
            label="anomalous",
            mask=mask,
            category=category,
            path=str(path),
        )

    test_items = [
        (path, defect_dir.name)
        for defect_dir in sorted(p for p in test_dir.iterdir() if p.is_dir())
        for path in _list_images(defect_dir)
    ]

    # Per-file loading is pure; map() keeps the sorted order
    with ThreadPoolExecutor(max_workers=max(1, num_workers)) as pool:
        normals = list(pool.map(load_normal, train_paths))
        test = list(pool.map(load_test, test_items))

    train, val = split_train_val(normals, split_ratio, seed)
    logger.info(
        f"Loaded {category}: {len(train)} train, {len(val)} val, {len(test)} test "
        f"({sum(s.is_anomalous for s in test)} anomalous)"
    )
    return DatasetSplit(category=category, train=train, val=val, test=test)


def split_train_val[T](items: list[T], ratio: float, seed: int) -> tuple[list[T], list[T]]:
    """Seeded split keeping the original order within each part."""
    n_train = int(round(len(items) * ratio))
    n_train = min(len(items), max(1, n_train)) if items else 0
    order = np.random.default_rng(seed).permutation(len(items))
    train_idx = set(order[:n_train].tolist())
    train = [item for i, item in enumerate(items) if i in train_idx]
    val = [item for i, item in enumerate(items) if i not in train_idx]
    return train, val


def _list_images(directory: Path) -> list[Path]:
    return sorted(
        p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS
    )
