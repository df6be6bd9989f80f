"""
Anomaly scoring: per-layer discrepancy maps, their distance/direction weights,
combination modes and the smoothed anomaly map.

The weighted map of layer l is W_l = alpha_l * R(P_l), with R a bilinear resize
to the image size. Combination modes:

    P1: W_3                 P4: sum of all W_l
    P2: W_1 * W_3           P5: W_1 * W_2 * W_3
    P3: W_2 * W_3           P6: W_1 * W_3 + W_2 * W_3

where * is elementwise. The combined map is Gaussian-smoothed (reflect padding)
and its maximum is the image-level score.
"""

import logging
from collections.abc import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from src.config import HARMONIC_MEAN_EPS, LAMBDA_CLAMP
from src.gtrans.losses import pixel_loss
from src.gtrans.network import GTransNetwork, iter_outputs
from src.models import (
    MODE_LAYER_POSITIONS,
    AnomalyMap,
    CombinationMode,
    ConfigError,
    FeaturePyramid,
    ImageSample,
    InvalidDataError,
    InvalidInputError,
    LayerLossMap,
    LayerWeights,
    ShapeError,
    WeightingMode,
)

logger = logging.getLogger(__name__)

CONSTANT_WEIGHT = 0.5


def _check_aligned(F_G_l: torch.Tensor, F_M_l: torch.Tensor) -> None:
    if F_G_l.shape != F_M_l.shape:
        raise ShapeError(
            f"Guide layer {tuple(F_G_l.shape)} and mapped layer "
            f"{tuple(F_M_l.shape)} differ"
        )


def layer_loss_map(
    F_G_l: torch.Tensor, F_M_l: torch.Tensor, layer: int = 1
) -> LayerLossMap:
    """Pixel loss of one layer divided by that layer's pixel count h*w."""
    values = pixel_loss(F_G_l, F_M_l)
    height, width = values.shape[-2:]
    return LayerLossMap(values=values / (height * width), layer=layer)


def alpha_mse(F_G_l: torch.Tensor, F_M_l: torch.Tensor) -> torch.Tensor:
    """
    Mean squared difference over all (channel, pixel) entries.

    A (c, h, w) pair yields a scalar, a (B, c, h, w) pair yields (B,) values.
    """
    _check_aligned(F_G_l, F_M_l)
    return (F_G_l - F_M_l).pow(2).mean(dim=(-3, -2, -1))


def alpha_cos(
    F_G_l: torch.Tensor,
    F_M_l: torch.Tensor,
    return_degenerate: bool = False,
) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
    """
    One minus the cosine similarity of the flattened layers, in [0, 2].

    Two all-zero inputs are defined as 0 and flagged degenerate. A single
    all-zero input has no direction and gives 1.

    Args:
        F_G_l: (c, h, w) or (B, c, h, w) guide features.
        F_M_l: Mapped features of the same shape.
        return_degenerate: Also return the boolean degenerate flags.
    """
    _check_aligned(F_G_l, F_M_l)
    g = F_G_l.flatten(-3)
    m = F_M_l.flatten(-3)
    g_norm = g.norm(dim=-1)
    m_norm = m.norm(dim=-1)
    denom = g_norm * m_norm
    dot = (g * m).sum(dim=-1)
    tiny = torch.finfo(g.dtype).tiny
    cosine = torch.where(denom > 0, dot / denom.clamp_min(tiny), 0.0)
    degenerate = (g_norm == 0) & (m_norm == 0)
    values = torch.where(degenerate, 0.0, (1.0 - cosine).clamp(0.0, 2.0))
    if degenerate.any():
        logger.warning(
            f"Cosine dissimilarity undefined for {int(degenerate.sum())} all-zero "
            "input pair(s); using 0"
        )
    if return_degenerate:
        return values, degenerate
    return values


def _as_tensor(value: float | torch.Tensor) -> torch.Tensor:
    if isinstance(value, torch.Tensor):
        return value
    return torch.tensor(value, dtype=torch.float64)


def layer_weight(
    a_mse: float | torch.Tensor,
    a_cos: float | torch.Tensor,
    lam: float,
) -> torch.Tensor:
    """
    Lambda-balanced harmonic mean of the distance and direction dissimilarities.

        alpha = lam * a_cos * a_mse / (a_mse + lam * a_cos)

    Returns 0 where the denominator falls below 1e-12.

    Raises:
        InvalidInputError: On negative dissimilarities or a non-positive lambda.
    """
    if lam <= 0:
        raise InvalidInputError(f"lambda must be positive, got {lam}")
    mse = _as_tensor(a_mse)
    cos = _as_tensor(a_cos)
    if (mse < 0).any() or (cos < 0).any():
        raise InvalidInputError("Dissimilarities must be non-negative")
    scaled_cos = lam * cos
    denom = mse + scaled_cos
    safe = denom.clamp_min(HARMONIC_MEAN_EPS)
    return torch.where(denom < HARMONIC_MEAN_EPS, 0.0, scaled_cos * mse / safe)


def compute_layer_weights(
    F_G: FeaturePyramid,
    F_M: FeaturePyramid,
    lambdas: Sequence[float],
    weighting: WeightingMode = "harmonic",
) -> list[LayerWeights]:
    """Per-layer, per-image coefficients used to weight the discrepancy maps."""
    if len(F_G) != len(F_M) or len(F_G) != len(lambdas):
        raise ShapeError(
            f"Guide ({len(F_G)}), mapped ({len(F_M)}) and lambda ({len(lambdas)}) "
            "layer counts differ"
        )
    weights = []
    for g, m, lam in zip(F_G.layers, F_M.layers, lambdas, strict=True):
        mse = alpha_mse(g, m)
        cos, degenerate = alpha_cos(g, m, return_degenerate=True)
        match weighting:
            case "harmonic":
                alpha = layer_weight(mse, cos, lam)
            case "mse":
                alpha = mse
            case "cos":
                alpha = cos
            case "constant":
                alpha = torch.full_like(mse, CONSTANT_WEIGHT)
            case _:
                raise ConfigError(f"Unknown weighting: {weighting}")
        weights.append(
            LayerWeights(
                alpha_mse=mse,
                alpha_cos=cos,
                lam=float(lam),
                alpha=alpha,
                degenerate=degenerate,
            )
        )
    return weights


def combine_maps(
    weighted: Sequence[torch.Tensor], mode: CombinationMode
) -> torch.Tensor:
    """
    Fuse weighted, resized per-layer maps according to a combination mode.

    Raises:
        ConfigError: If the mode reads a layer position that is not configured.
    """
    required = MODE_LAYER_POSITIONS[mode]
    if required and max(required) > len(weighted):
        raise ConfigError(
            f"Combination mode {mode} needs {max(required)} layers, "
            f"got {len(weighted)}"
        )
    if not weighted:
        raise ConfigError("No layer maps to combine")

    match mode:
        case "P1":
            return weighted[2]
        case "P2":
            return weighted[0] * weighted[2]
        case "P3":
            return weighted[1] * weighted[2]
        case "P4":
            return torch.stack(list(weighted)).sum(dim=0)
        case "P5":
            return weighted[0] * weighted[1] * weighted[2]
        case "P6":
            return weighted[0] * weighted[2] + weighted[1] * weighted[2]
    raise ConfigError(f"Unknown combination mode: {mode}")


def weighted_layer_maps(
    F_G: FeaturePyramid,
    F_M: FeaturePyramid,
    lambdas: Sequence[float],
    out_size: tuple[int, int],
    weighting: WeightingMode = "harmonic",
) -> list[torch.Tensor]:
    """alpha_l * R(P_l) for every layer, each shaped (B, H, W)."""
    weights = compute_layer_weights(F_G, F_M, lambdas, weighting)
    maps = []
    for position, (g, m, w) in enumerate(
        zip(F_G.layers, F_M.layers, weights, strict=True), start=1
    ):
        loss_map = layer_loss_map(g, m, layer=position).values
        if loss_map.ndim == 2:
            loss_map = loss_map.unsqueeze(0)
        resized = F.interpolate(
            loss_map.unsqueeze(1), size=out_size, mode="bilinear", align_corners=False
        )[:, 0]
        alpha = w.alpha.to(resized.dtype).reshape(-1, 1, 1)
        maps.append(alpha * resized)
    return maps


def anomaly_map(
    F_G: FeaturePyramid,
    F_M: FeaturePyramid,
    lambdas: Sequence[float],
    mode: CombinationMode = "P6",
    sigma: float = 4.0,
    out_size: tuple[int, int] = (224, 224),
    weighting: WeightingMode = "harmonic",
    keep_layer_maps: bool = False,
) -> list[AnomalyMap]:
    """
    Anomaly maps of every image in a batch.

    Args:
        F_G: Guide pyramid of the batch.
        F_M: Mapped student pyramid of the batch.
        lambdas: Per-layer balance between distance and direction terms.
        mode: Combination mode P1..P6.
        sigma: Gaussian standard deviation in pixels; 0 disables smoothing.
        out_size: (H, W) of the preprocessed images.
        weighting: Layer coefficient (harmonic, mse, cos or the constant 0.5).
        keep_layer_maps: Attach the unsmoothed weighted per-layer maps.

    Returns:
        One AnomalyMap per image, in batch order.
    """
    weighted = weighted_layer_maps(F_G, F_M, lambdas, out_size, weighting)
    combined = combine_maps(weighted, mode).detach().cpu().double().numpy()
    layer_arrays = [w.detach().cpu().double().numpy() for w in weighted]

    maps = []
    for index, values in enumerate(combined):
        if sigma > 0:
            values = gaussian_filter(values, sigma=sigma, mode="reflect")
        values = np.maximum(values, 0.0)
        maps.append(
            AnomalyMap(
                values=values,
                image_score=float(values.max()),
                combination_mode=mode,
                sigma=sigma,
                layer_maps=(
                    [layer[index] for layer in layer_arrays] if keep_layer_maps else None
                ),
            )
        )
    return maps


def image_score(amap: AnomalyMap | np.ndarray) -> float:
    """Maximum over all pixels of an anomaly map."""
    values = amap.values if isinstance(amap, AnomalyMap) else np.asarray(amap)
    return float(values.max())


def lambda_from_means(mean_mse: float, mean_cos: float) -> float:
    """
    Ratio of mean distance to mean direction dissimilarity, clamped.

    A zero mean direction term maps to the upper clamp, or to 1 when both means
    are zero.
    """
    low, high = LAMBDA_CLAMP
    if mean_cos <= 0:
        lam = high if mean_mse > 0 else 1.0
        logger.warning(f"Mean cosine dissimilarity is zero; lambda set to {lam:g}")
        return lam
    ratio = mean_mse / mean_cos
    lam = min(max(ratio, low), high)
    if lam != ratio:
        logger.warning(f"Lambda {ratio:g} clamped to {lam:g}")
    return lam


def dissimilarity_statistics(
    network: GTransNetwork,
    samples: Sequence[ImageSample],
    batch_size: int = 8,
    device: torch.device | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-image alpha_mse and alpha_cos over a sample set.

    Returns:
        Two (n_samples, n_layers) float64 arrays.
    """
    mse_rows: list[np.ndarray] = []
    cos_rows: list[np.ndarray] = []
    for _, output in iter_outputs(network, samples, batch_size, device):
        mse_layers, cos_layers = [], []
        for g, m in zip(output.guide.layers, output.mapped.layers, strict=True):
            cos = alpha_cos(g, m)
            assert isinstance(cos, torch.Tensor)
            mse_layers.append(alpha_mse(g, m))
            cos_layers.append(cos)
        mse_rows.append(torch.stack(mse_layers, dim=1).double().cpu().numpy())
        cos_rows.append(torch.stack(cos_layers, dim=1).double().cpu().numpy())
    return np.concatenate(mse_rows), np.concatenate(cos_rows)


def calibrate_lambda(
    network: GTransNetwork,
    samples: Sequence[ImageSample],
    batch_size: int = 8,
    device: torch.device | None = None,
) -> list[float]:
    """
    Per-layer lambda = mean alpha_mse / mean alpha_cos over normal validation images.

    Raises:
        InvalidDataError: If `samples` is empty.
    """
    if not samples:
        raise InvalidDataError("Lambda calibration needs at least one validation image")
    mse, cos = dissimilarity_statistics(network, samples, batch_size, device)
    lambdas = [
        lambda_from_means(float(mean_mse), float(mean_cos))
        for mean_mse, mean_cos in zip(mse.mean(axis=0), cos.mean(axis=0), strict=True)
    ]
    logger.info(
        f"Calibrated lambdas on {len(samples)} images: "
        + ", ".join(f"{lam:.4g}" for lam in lambdas)
    )
    return lambdas


def score_samples(
    network: GTransNetwork,
    samples: Sequence[ImageSample],
    lambdas: Sequence[float],
    mode: CombinationMode = "P6",
    sigma: float = 4.0,
    weighting: WeightingMode = "harmonic",
    batch_size: int = 8,
    device: torch.device | None = None,
    keep_layer_maps: bool = False,
) -> list[AnomalyMap]:
    """Anomaly maps of every sample at its preprocessed image size, in order."""
    maps: list[AnomalyMap] = []
    for chunk, output in iter_outputs(network, samples, batch_size, device):
        out_size = chunk[0].pixels.shape[:2]
        maps.extend(
            anomaly_map(
                output.guide,
                output.mapped,
                lambdas,
                mode=mode,
                sigma=sigma,
                out_size=(int(out_size[0]), int(out_size[1])),
                weighting=weighting,
                keep_layer_maps=keep_layer_maps,
            )
        )
    return maps
