import logging
from collections.abc import Sequence
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

from src.config import MASK_BINARIZE_THRESHOLD
from src.models import (
    CorruptSampleError,
    ImageSample,
    InvalidInputError,
    PreprocessConfig,
)

logger = logging.getLogger(__name__)


class ImageProcessor:
    """
    Deterministic image and mask preprocessing.

    All methods are class methods as there's no state beyond the PreprocessConfig.

    read_image: file -> H0 x W0 x 3 uint8
    preprocess_image: raw array -> crop x crop x 3 normalized float32
    preprocess_mask: raw mask -> crop x crop {0, 1} uint8
    """

    @classmethod
    def read_image(cls, path: str | Path) -> np.ndarray:
        """Read an image file as RGB (grayscale files are expanded to 3 channels)."""
        try:
            with Image.open(path) as img:
                return np.asarray(img.convert("RGB"))
        except OSError as e:
            raise CorruptSampleError(f"Could not read image {path}: {e}") from e

    @classmethod
    def read_mask(cls, path: str | Path) -> np.ndarray:
        """Read a mask file as a single-channel array."""
        try:
            with Image.open(path) as img:
                return np.asarray(img.convert("L"))
        except OSError as e:
            raise CorruptSampleError(f"Could not read mask {path}: {e}") from e

    @classmethod
    def preprocess_image(cls, raw: np.ndarray, config: PreprocessConfig) -> np.ndarray:
        """
        Resize, center-crop, scale to [0, 1] and channel-normalize an image.

        Args:
            raw: H0 x W0 x 3 array; uint8 values are scaled by 1/255, floats are
                taken to already lie in [0, 1].
            config: Resize edge, crop size and normalization statistics.

        Returns:
            crop x crop x 3 float32 array.

        Raises:
            InvalidInputError: If the input is not 3-channel or smaller than 2x2.
        """
        raw = np.asarray(raw)
        if raw.ndim != 3 or raw.shape[2] != 3:
            raise InvalidInputError(f"Expected H x W x 3 image, got shape {raw.shape}")
        cls._check_min_size(raw.shape[:2])

        image = torch.from_numpy(cls._to_unit_range(raw)).permute(2, 0, 1)
        image = cls._resize_and_crop(image, config, InterpolationMode.BILINEAR)
        image = TF.normalize(image, mean=list(config.mean), std=list(config.std))
        return image.permute(1, 2, 0).contiguous().numpy()

    @classmethod
    def preprocess_mask(cls, raw: np.ndarray, config: PreprocessConfig) -> np.ndarray:
        """
        Binarize a mask at 0.5 and apply the image geometry with nearest resampling.

        Returns:
            crop x crop uint8 array with values in {0, 1}.
        """
        raw = np.asarray(raw)
        if raw.ndim == 3:
            raw = raw[..., 0]
        if raw.ndim != 2:
            raise InvalidInputError(f"Expected H x W mask, got shape {raw.shape}")
        cls._check_min_size(raw.shape)

        binary = (cls._to_unit_range(raw) >= MASK_BINARIZE_THRESHOLD).astype(np.float32)
        mask = torch.from_numpy(binary).unsqueeze(0)
        mask = cls._resize_and_crop(mask, config, InterpolationMode.NEAREST)
        return mask[0].numpy().astype(np.uint8)

    @classmethod
    def denormalize(cls, pixels: np.ndarray, config: PreprocessConfig) -> np.ndarray:
        """Undo channel normalization; returns an H x W x 3 array clipped to [0, 1]."""
        mean = np.asarray(config.mean, dtype=np.float32)
        std = np.asarray(config.std, dtype=np.float32)
        return np.clip(pixels * std + mean, 0.0, 1.0)

    @classmethod
    def to_batch(cls, samples: Sequence[ImageSample]) -> torch.Tensor:
        """Stack preprocessed H x W x 3 samples into a (B, 3, H, W) float32 tensor."""
        if not samples:
            raise InvalidInputError("Cannot batch an empty sample list")
        stacked = np.stack([sample.pixels for sample in samples]).astype(np.float32)
        return torch.from_numpy(stacked).permute(0, 3, 1, 2).contiguous()

    @staticmethod
    def _to_unit_range(raw: np.ndarray) -> np.ndarray:
        if np.issubdtype(raw.dtype, np.integer):
            return raw.astype(np.float32) / float(np.iinfo(raw.dtype).max)
        return raw.astype(np.float32)

    @staticmethod
    def _check_min_size(shape: tuple[int, ...]) -> None:
        if shape[0] < 2 or shape[1] < 2:
            raise InvalidInputError(f"Input must be at least 2x2, got {shape[:2]}")

    @staticmethod
    def _resize_and_crop(
        image: torch.Tensor,
        config: PreprocessConfig,
        interpolation: InterpolationMode,
    ) -> torch.Tensor:
        edge = config.resize_edge
        if tuple(image.shape[-2:]) != (edge, edge):
            image = TF.resize(
                image,
                [edge, edge],
                interpolation=interpolation,
                antialias=interpolation == InterpolationMode.BILINEAR,
            )
        return TF.center_crop(image, [config.crop_size, config.crop_size])
