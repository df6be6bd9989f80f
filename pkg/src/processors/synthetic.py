"""Synthetic texture dataset for desk-scale runs without MVTec."""

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from src.config import (
    MVTEC_GOOD_DIR,
    MVTEC_GROUND_TRUTH_DIR,
    MVTEC_MASK_SUFFIX,
    MVTEC_TEST_DIR,
    MVTEC_TRAIN_DIR,
)
from src.models import (
    ConfigError,
    DatasetSplit,
    ImageSample,
    PreprocessConfig,
    SyntheticSpec,
)
from src.processors.image_processor import ImageProcessor
from src.processors.mvtec import split_train_val

logger = logging.getLogger(__name__)

ANOMALY_DIR = "patch"


@dataclass(frozen=True)
class RenderedImage:
    name: str
    pixels: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray | None
    is_test: bool


def render_synthetic_images(spec: SyntheticSpec) -> list[RenderedImage]:
    """
    Render the raw images of a synthetic dataset in a fixed order.

    Normal images are smoothed Gaussian noise; anomalous ones additionally carry
    a patch of unsmoothed uniform noise whose footprint is the exact mask.
    """
    size = spec.image_size
    if spec.patch_size > size:
        raise ConfigError(
            f"Anomaly patch {spec.patch_size} does not fit a {size}x{size} image"
        )

    rng = np.random.default_rng(spec.seed)
    images: list[RenderedImage] = []
    for i in range(spec.n_normal):
        images.append(RenderedImage(f"train_{i:03d}", _texture(rng, spec), None, False))
    for i in range(spec.n_test_normal):
        images.append(RenderedImage(f"good_{i:03d}", _texture(rng, spec), None, True))
    for i in range(spec.n_test_anomalous):
        pixels = _texture(rng, spec)
        mask = _patch_mask(rng, spec)
        noise = rng.uniform(0.0, 1.0, size=pixels.shape).astype(np.float32)
        pixels = np.where(mask[..., None] == 1, noise, pixels)
        images.append(RenderedImage(f"{ANOMALY_DIR}_{i:03d}", pixels, mask, True))
    return images


def generate_synthetic_dataset(
    spec: SyntheticSpec,
    preprocess: PreprocessConfig | None = None,
) -> DatasetSplit:
    """
    Build a fully deterministic DatasetSplit from a SyntheticSpec.

    Images keep their native size; only the normalization statistics of
    `preprocess` are applied.
    """
    stats = preprocess or PreprocessConfig()
    config = stats.model_copy(
        update={"resize_edge": spec.image_size, "crop_size": spec.image_size}
    )

    normals: list[ImageSample] = []
    test: list[ImageSample] = []
    for image in render_synthetic_images(spec):
        pixels = ImageProcessor.preprocess_image(image.pixels, config)
        path = f"synthetic://{spec.category}/{image.name}"
        if image.mask is not None:
            sample = ImageSample(
                pixels=pixels,
                label="anomalous",
                mask=image.mask,
                category=spec.category,
                path=path,
            )
        else:
            sample = ImageSample(
                pixels=pixels, label="normal", category=spec.category, path=path
            )
        (test if image.is_test else normals).append(sample)

    train, val = split_train_val(normals, spec.split_ratio, spec.seed)
    logger.info(
        f"Generated synthetic dataset: {len(train)} train, {len(val)} val, {len(test)} test"
    )
    return DatasetSplit(category=spec.category, train=train, val=val, test=test)


def write_synthetic_dataset(spec: SyntheticSpec, root_path: str | Path) -> Path:
    """
    Write a synthetic dataset to disk in MVTec layout.

    Returns:
        The category directory that was written.
    """
    category_dir = Path(root_path) / spec.category
    train_dir = category_dir / MVTEC_TRAIN_DIR / MVTEC_GOOD_DIR
    good_dir = category_dir / MVTEC_TEST_DIR / MVTEC_GOOD_DIR
    patch_dir = category_dir / MVTEC_TEST_DIR / ANOMALY_DIR
    gt_dir = category_dir / MVTEC_GROUND_TRUTH_DIR / ANOMALY_DIR
    for directory in (train_dir, good_dir, patch_dir, gt_dir):
        directory.mkdir(parents=True, exist_ok=True)

    counts = {"train": 0, "good": 0, ANOMALY_DIR: 0}
    for image in render_synthetic_images(spec):
        kind = image.name.rsplit("_", 1)[0]
        stem = f"{counts[kind]:03d}"
        counts[kind] += 1
        as_uint8 = (np.clip(image.pixels, 0.0, 1.0) * 255).round().astype(np.uint8)
        target = {"train": train_dir, "good": good_dir, ANOMALY_DIR: patch_dir}[kind]
        Image.fromarray(as_uint8).save(target / f"{stem}.png")
        if image.mask is not None:
            Image.fromarray(image.mask * 255).save(
                gt_dir / f"{stem}{MVTEC_MASK_SUFFIX}.png"
            )

    logger.info(f"Wrote synthetic dataset to {category_dir}: {counts}")
    return category_dir


def _texture(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    size = spec.image_size
    noise = rng.standard_normal((size, size, 3))
    smooth = gaussian_filter(noise, sigma=(spec.texture_sigma, spec.texture_sigma, 0))
    smooth = (smooth - smooth.mean()) / (smooth.std() + 1e-8)
    return np.clip(0.5 + 0.15 * smooth, 0.0, 1.0).astype(np.float32)


def _patch_mask(rng: np.random.Generator, spec: SyntheticSpec) -> np.ndarray:
    size, patch = spec.image_size, spec.patch_size
    top = int(rng.integers(0, size - patch + 1))
    left = int(rng.integers(0, size - patch + 1))
    mask = np.zeros((size, size), dtype=np.uint8)
    if spec.anomaly == "square":
        mask[top : top + patch, left : left + patch] = 1
    else:
        yy, xx = np.mgrid[:patch, :patch]
        center = (patch - 1) / 2.0
        disk = (yy - center) ** 2 + (xx - center) ** 2 <= (patch / 2.0) ** 2
        mask[top : top + patch, left : left + patch] = disk.astype(np.uint8)
    return mask
