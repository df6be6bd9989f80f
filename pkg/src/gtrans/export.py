import logging
from pathlib import Path

import matplotlib
import numpy as np
from PIL import Image

from src.models import AnomalyMap, ImageSample, PreprocessConfig
from src.processors.image_processor import ImageProcessor

logger = logging.getLogger(__name__)

HEATMAP_CMAP = "jet"
OVERLAY_ALPHA = 0.5


def _stem(sample: ImageSample, index: int) -> str:
    """File stem unique within a test set: <index>_<defect>_<name>."""
    parts = Path(sample.path).parts
    defect = parts[-2] if len(parts) >= 2 else sample.label
    return f"{index:04d}_{defect}_{Path(sample.path).stem}"


def normalize_map(values: np.ndarray) -> np.ndarray:
    """Scale a map to [0, 1] by its own range; a constant map becomes all zeros."""
    low, high = float(values.min()), float(values.max())
    if high <= low:
        return np.zeros_like(values, dtype=np.float64)
    return (values - low) / (high - low)


def heatmap_rgb(values: np.ndarray) -> np.ndarray:
    """H x W x 3 uint8 rendering of a per-map normalized anomaly map."""
    colored = matplotlib.colormaps[HEATMAP_CMAP](normalize_map(values))[..., :3]
    return (colored * 255).round().astype(np.uint8)


def save_raw(amap: AnomalyMap, filepath: str | Path) -> Path:
    """
    Write the raw float map as .npy, or as .npz with per-layer maps when the
    map carries them.
    """
    path = Path(filepath)
    if amap.layer_maps is not None:
        path = path.with_suffix(".npz")
        layers = {f"layer_{i + 1}": layer for i, layer in enumerate(amap.layer_maps)}
        np.savez(path, anomaly_map=amap.values, **layers)
    else:
        path = path.with_suffix(".npy")
        np.save(path, amap.values)
    return path


def save_heatmap(amap: AnomalyMap, filepath: str | Path) -> Path:
    path = Path(filepath)
    Image.fromarray(heatmap_rgb(amap.values)).save(path)
    return path


def save_overlay(
    amap: AnomalyMap,
    sample: ImageSample,
    preprocess: PreprocessConfig,
    filepath: str | Path,
) -> Path:
    """Blend the heatmap over the denormalized input image."""
    path = Path(filepath)
    image = ImageProcessor.denormalize(sample.pixels, preprocess)
    heat = heatmap_rgb(amap.values).astype(np.float64) / 255.0
    blended = (1.0 - OVERLAY_ALPHA) * image + OVERLAY_ALPHA * heat
    Image.fromarray((np.clip(blended, 0.0, 1.0) * 255).round().astype(np.uint8)).save(
        path
    )
    return path


def export_maps(
    maps: list[AnomalyMap],
    samples: list[ImageSample],
    preprocess: PreprocessConfig,
    out_dir: str | Path,
) -> list[Path]:
    """
    Write raw, heatmap and overlay files for every scored test image.

    Returns:
        The written paths, three per image.
    """
    directory = Path(out_dir)
    directory.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for index, (amap, sample) in enumerate(zip(maps, samples, strict=True)):
        stem = _stem(sample, index)
        written.append(save_raw(amap, directory / f"{stem}_map"))
        written.append(save_heatmap(amap, directory / f"{stem}_heatmap.png"))
        written.append(
            save_overlay(amap, sample, preprocess, directory / f"{stem}_overlay.png")
        )
    logger.info(f"Wrote {len(written)} map files to {directory}")
    return written
