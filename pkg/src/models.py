"""GTrans configuration schemas, domain records and exception classes."""

import logging
import time
from types import TracebackType
from typing import Literal

import numpy as np
import pandas as pd
import torch
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.config import (
    BACKBONE_STAGES,
    DATA_ROOT,
    DEVICE,
    IMAGENET_MEAN,
    IMAGENET_STD,
    OUTPUT_DIR,
    WEIGHT_CACHE_DIR,
)

BackboneFamily = Literal["resnet34", "wide_resnet50_2", "tiny_test"]
BackboneRole = Literal["guide", "student"]
PyramidSource = Literal["guide", "student", "mapped"]
SampleLabel = Literal["normal", "anomalous"]
CombinationMode = Literal["P1", "P2", "P3", "P4", "P5", "P6"]
WeightingMode = Literal["harmonic", "mse", "cos", "constant"]

# Pyramid positions (1-based) each combination mode reads; P4 reads every layer.
MODE_LAYER_POSITIONS: dict[str, tuple[int, ...]] = {
    "P1": (3,),
    "P2": (1, 3),
    "P3": (2, 3),
    "P4": (),
    "P5": (1, 2, 3),
    "P6": (1, 2, 3),
}


# Exception classes


class GTransError(Exception):
    """Base exception for GTrans errors."""

    pass


class ConfigError(GTransError):
    """Raised when a configuration key or value is invalid."""

    pass


class DatasetLayoutError(GTransError):
    """Raised when a dataset directory does not follow the expected layout."""

    pass


class CorruptSampleError(GTransError):
    """Raised when an image and its mask cannot be paired."""

    pass


class InvalidInputError(GTransError):
    """Raised when an array handed to a pure function has invalid shape or values."""

    pass


class ShapeError(GTransError):
    """Raised when tensors flowing through the network have mismatched shapes."""

    pass


class InvalidDataError(GTransError):
    """Raised when a split or sample set is unusable (e.g. empty)."""

    pass


class TrainingDivergedError(GTransError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f"Training diverged at step {step}: loss={loss}")
        self.step = step
        self.loss = loss


class UndefinedMetricError(GTransError):
    """Raised when a metric is undefined for the given labels."""

    pass


class CheckpointVersionError(GTransError):
    """Raised when a checkpoint container cannot be loaded by this version."""

    pass


class WeightDownloadError(GTransError):
    """Raised when pretrained weights cannot be fetched."""

    pass


# Configuration schemas


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PreprocessConfig(StrictModel):
    """Resize, center-crop and normalization settings."""

    resize_edge: int = Field(default=256, gt=1)
    crop_size: int = Field(default=224, gt=1)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD

    @model_validator(mode="after")
    def check_crop(self) -> "PreprocessConfig":
        if self.crop_size > self.resize_edge:
            raise ValueError("crop_size must be <= resize_edge")
        if any(s <= 0 for s in self.std):
            raise ValueError("std entries must be positive")
        return self


class DataConfig(StrictModel):
    """Train/validation split settings."""

    split_ratio: float = Field(default=0.8, gt=0.0, le=1.0)
    split_seed: int = 0


class SyntheticSpec(StrictModel):
    """Synthetic texture dataset with injected out-of-distribution patches."""

    image_size: int = Field(default=64, gt=1)
    n_normal: int = Field(default=40, gt=0)
    n_test_normal: int = Field(default=10, ge=0)
    n_test_anomalous: int = Field(default=10, ge=0)
    split_ratio: float = Field(default=0.8, gt=0.0, le=1.0)
    texture: Literal["smoothed_noise"] = "smoothed_noise"
    texture_sigma: float = Field(default=3.0, gt=0.0)
    anomaly: Literal["square", "blob"] = "square"
    patch_size: int = Field(default=12, gt=0)
    seed: int = 0
    category: str = "synthetic"


class BackboneConfig(StrictModel):
    """Backbone family and tapped residual stages."""

    family: BackboneFamily = "resnet34"
    critical_layers: list[int] = Field(default_factory=lambda: [1, 2, 3])
    pretrained: bool = True

    @model_validator(mode="after")
    def check_layers(self) -> "BackboneConfig":
        layers = self.critical_layers
        if not layers:
            raise ValueError("critical_layers must not be empty")
        if any(b <= a for a, b in zip(layers, layers[1:], strict=False)):
            raise ValueError("critical_layers must be strictly increasing")
        available = BACKBONE_STAGES[self.family]
        missing = [layer for layer in layers if layer not in available]
        if missing:
            raise ValueError(
                f"critical_layers {missing} not available for {self.family} "
                f"(stages {list(available)})"
            )
        return self

    def for_role(self, role: BackboneRole) -> "BackboneConfig":
        """Return the per-instance config: the guide is pretrained, the student is not."""
        return self.model_copy(update={"pretrained": role == "guide"})


class TokenizerConfig(StrictModel):
    groups: int = Field(default=8, gt=0)
    dim: int = Field(default=256, gt=0)


class TfmConfig(StrictModel):
    blocks: int = Field(default=2, ge=1)
    use_decoder: bool = True
    enabled: bool = True
    encoder_input: Literal["guide", "student"] = "guide"


class MapperConfig(StrictModel):
    token_source: Literal["encoder", "decoder"] = "encoder"
    query_source: Literal["guide", "student"] = "guide"


class TrainConfig(StrictModel):
    """Optimizer schedule and loop settings."""

    epochs: int = Field(default=300, gt=0)
    batch_size: int = Field(default=32, gt=0)
    lr_init: float = Field(default=1e-3, gt=0.0)
    weight_decay: float = Field(default=1e-4, ge=0.0)
    decay_rate: float = Field(default=0.9, gt=0.0, le=1.0)
    seed: int = 0
    checkpoint_dir: str | None = None
    show_progress: bool = True


class ScoreConfig(StrictModel):
    mode: CombinationMode = "P6"
    sigma: float = Field(default=4.0, ge=0.0)
    lambda_source: Literal["calibrated", "fixed"] = "calibrated"
    fixed_lambda: float = Field(default=1.0, gt=0.0)
    weighting: WeightingMode = "harmonic"
    batch_size: int = Field(default=8, gt=0)


class MetricsConfig(StrictModel):
    fpr_cap: float = Field(default=0.3, gt=0.0, le=1.0)


class PathsConfig(StrictModel):
    data_root: str = DATA_ROOT
    weight_cache: str = WEIGHT_CACHE_DIR
    output_dir: str = OUTPUT_DIR


class RunConfig(StrictModel):
    """Merged configuration tree for one run."""

    category: str = "bottle"
    seed: int = 0
    device: str = DEVICE
    preprocess: PreprocessConfig = Field(default_factory=PreprocessConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    synthetic: SyntheticSpec = Field(default_factory=SyntheticSpec)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    tokenizer: TokenizerConfig = Field(default_factory=TokenizerConfig)
    tfm: TfmConfig = Field(default_factory=TfmConfig)
    mapper: MapperConfig = Field(default_factory=MapperConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    score: ScoreConfig = Field(default_factory=ScoreConfig)
    metrics: MetricsConfig = Field(default_factory=MetricsConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)

    @model_validator(mode="after")
    def check_combinations(self) -> "RunConfig":
        if self.mapper.token_source == "decoder" and not (
            self.tfm.enabled and self.tfm.use_decoder
        ):
            raise ValueError("mapper.token_source=decoder requires an enabled decoder")
        required = MODE_LAYER_POSITIONS[self.score.mode]
        if required and max(required) > len(self.backbone.critical_layers):
            raise ValueError(
                f"score.mode {self.score.mode} needs {max(required)} critical layers, "
                f"got {len(self.backbone.critical_layers)}"
            )
        return self


# Domain records


class ArrayModel(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)


class ImageSample(ArrayModel):
    """One preprocessed image with its label and optional ground-truth mask."""

    pixels: np.ndarray
    label: SampleLabel
    mask: np.ndarray | None = None
    category: str
    path: str

    @field_validator("pixels")
    @classmethod
    def check_pixels(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 3:
            raise ValueError(f"pixels must be HxWxC, got shape {v.shape}")
        return v

    @model_validator(mode="after")
    def check_mask(self) -> "ImageSample":
        if self.mask is None:
            return self
        if self.label != "anomalous":
            raise ValueError("only anomalous samples carry a mask")
        if self.mask.shape != self.pixels.shape[:2]:
            raise ValueError(
                f"mask shape {self.mask.shape} != pixel shape {self.pixels.shape[:2]}"
            )
        if not np.isin(self.mask, (0, 1)).all():
            raise ValueError("mask values must be in {0, 1}")
        return self

    @property
    def is_anomalous(self) -> bool:
        return self.label == "anomalous"

    def mask_or_zeros(self) -> np.ndarray:
        """Ground-truth mask, all-zero for normal samples."""
        if self.mask is not None:
            return self.mask
        return np.zeros(self.pixels.shape[:2], dtype=np.uint8)


class DatasetSplit(ArrayModel):
    """Immutable train/val/test split of one category."""

    category: str
    train: tuple[ImageSample, ...]
    val: tuple[ImageSample, ...]
    test: tuple[ImageSample, ...]

    @model_validator(mode="after")
    def check_split(self) -> "DatasetSplit":
        for sample in (*self.train, *self.val):
            if sample.label != "normal":
                raise ValueError(f"train/val sample {sample.path} is not normal")
        overlap = {s.path for s in self.train} & {s.path for s in self.val}
        if overlap:
            raise ValueError(f"train and val share samples: {sorted(overlap)[:3]}")
        return self


class FeaturePyramid(ArrayModel):
    """Batched per-critical-layer feature maps, each shaped (B, c_l, h_l, w_l)."""

    layers: list[torch.Tensor]
    source: PyramidSource

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, index: int) -> torch.Tensor:
        return self.layers[index]

    @property
    def shapes(self) -> list[tuple[int, ...]]:
        return [tuple(layer.shape) for layer in self.layers]

    @property
    def channels(self) -> list[int]:
        return [layer.shape[1] for layer in self.layers]

    def detach(self) -> "FeaturePyramid":
        return FeaturePyramid(
            layers=[layer.detach() for layer in self.layers], source=self.source
        )


class TokenGroup(ArrayModel):
    """Concatenated visual tokens of shape (B, d, g*L); block k belongs to layer_order[k]."""

    tokens: torch.Tensor
    groups: int
    layer_order: list[int]

    @property
    def dim(self) -> int:
        return self.tokens.shape[1]


class LayerLossMap(ArrayModel):
    values: torch.Tensor
    layer: int


class LayerWeights(ArrayModel):
    """Per-image dissimilarity coefficients of one critical layer."""

    alpha_mse: torch.Tensor
    alpha_cos: torch.Tensor
    lam: float
    alpha: torch.Tensor
    degenerate: torch.Tensor


class AnomalyMap(ArrayModel):
    """Smoothed H x W anomaly score field of one image."""

    values: np.ndarray
    image_score: float
    combination_mode: CombinationMode
    sigma: float
    layer_maps: list[np.ndarray] | None = None

    @model_validator(mode="after")
    def check_score(self) -> "AnomalyMap":
        if self.values.ndim != 2:
            raise ValueError(f"anomaly map must be 2-D, got {self.values.shape}")
        if self.image_score != float(self.values.max()):
            raise ValueError("image_score must equal the map maximum")
        return self


class TrainLogEntry(BaseModel):
    epoch: int
    train_loss: float
    val_loss: float | None
    lr: float
    wall_time: float


class TrainLog(BaseModel):
    """One entry per completed epoch."""

    entries: list[TrainLogEntry] = Field(default_factory=list)

    def append(self, entry: TrainLogEntry) -> None:
        self.entries.append(entry)

    @property
    def train_losses(self) -> list[float]:
        return [entry.train_loss for entry in self.entries]

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [entry.model_dump() for entry in self.entries],
            columns=["epoch", "train_loss", "val_loss", "lr", "wall_time"],
        )

    def to_csv(self, filepath: str) -> None:
        self.to_frame()[["epoch", "train_loss", "val_loss", "lr"]].to_csv(
            filepath, index=False
        )


class CategoryReport(BaseModel):
    category: str
    image_auroc: float = Field(ge=0.0, le=1.0)
    pixel_auroc: float = Field(ge=0.0, le=1.0)
    aupro: float = Field(ge=0.0, le=1.0)
    n_images: int
    n_anomalous: int
    n_pixels: int
    n_thresholds: int


class EvaluationReport(BaseModel):
    """Per-category metrics plus their arithmetic means."""

    fpr_cap: float
    categories: list[CategoryReport] = Field(default_factory=list)

    def _mean(self, field: str) -> float:
        if not self.categories:
            return float("nan")
        return float(np.mean([getattr(c, field) for c in self.categories]))

    @property
    def mean_image_auroc(self) -> float:
        return self._mean("image_auroc")

    @property
    def mean_pixel_auroc(self) -> float:
        return self._mean("pixel_auroc")

    @property
    def mean_aupro(self) -> float:
        return self._mean("aupro")

    def to_frame(self) -> pd.DataFrame:
        columns = [
            "category",
            "image_auroc",
            "pixel_auroc",
            "aupro",
            "n_images",
            "n_anomalous",
        ]
        return pd.DataFrame(
            [c.model_dump() for c in self.categories], columns=columns
        )

    def to_json_dict(self) -> dict[str, object]:
        return {
            "fpr_cap": self.fpr_cap,
            "categories": [c.model_dump() for c in self.categories],
            "mean": {
                "image_auroc": self.mean_image_auroc,
                "pixel_auroc": self.mean_pixel_auroc,
                "aupro": self.mean_aupro,
            },
        }


# Error handling utilities


class ErrorContext:
    """
    Context manager that logs the start, duration and failure of a pipeline stage.

    Exceptions always propagate. Known GTransErrors are logged as one line; anything
    else gets a traceback.
    """

    def __init__(self, operation_name: str, logger_instance: logging.Logger) -> None:
        self.operation_name = operation_name
        self.logger = logger_instance
        self.started = 0.0
        self.elapsed: float | None = None

    def __enter__(self) -> "ErrorContext":
        self.logger.debug(f"Starting operation: {self.operation_name}")
        self.started = time.perf_counter()
        return self

    def __exit__(
        self,
        exc_type: type[BaseException] | None,
        exc_val: BaseException | None,
        exc_tb: TracebackType | None,
    ) -> None:
        self.elapsed = time.perf_counter() - self.started
        if exc_val is None:
            self.logger.debug(
                f"Operation completed: {self.operation_name} ({self.elapsed:.1f}s)"
            )
        elif isinstance(exc_val, GTransError):
            self.logger.error(f"Operation '{self.operation_name}' failed: {exc_val}")
        else:
            self.logger.error(
                f"Operation '{self.operation_name}' failed: {exc_val}", exc_info=exc_val
            )
