import logging
from collections.abc import Sequence

import numpy as np
import torch
from skimage import measure
from sklearn.metrics import auc, roc_auc_score

from src.config import AUPRO_EXACT_MAX_THRESHOLDS, AUPRO_QUANTILE_THRESHOLDS
from src.gtrans.network import GTransNetwork
from src.gtrans.scoring import image_score, score_samples
from src.models import (
    AnomalyMap,
    CategoryReport,
    ConfigError,
    ImageSample,
    InvalidDataError,
    InvalidInputError,
    RunConfig,
    UndefinedMetricError,
)

logger = logging.getLogger(__name__)


def _to_numpy(values: Sequence[float] | np.ndarray) -> np.ndarray:
    return np.asarray(values, dtype=np.float64).ravel()


def auroc(scores: Sequence[float] | np.ndarray, labels: Sequence[int] | np.ndarray) -> float:
    """
    Area under the ROC curve, equal to the Mann-Whitney statistic with ties
    counted as one half.

    Raises:
        InvalidInputError: On length mismatch or labels outside {0, 1}.
        UndefinedMetricError: If only one class is present.
    """
    score_arr = _to_numpy(scores)
    label_arr = np.asarray(labels).ravel()
    if score_arr.shape != label_arr.shape:
        raise InvalidInputError(
            f"{score_arr.size} scores but {label_arr.size} labels"
        )
    if not np.isin(label_arr, (0, 1)).all():
        raise InvalidInputError("Labels must be 0 or 1")
    if np.unique(label_arr).size < 2:
        raise UndefinedMetricError("AUROC needs both normal and anomalous samples")
    return float(roc_auc_score(label_arr, score_arr))


def _map_values(amap: AnomalyMap | np.ndarray) -> np.ndarray:
    return amap.values if isinstance(amap, AnomalyMap) else np.asarray(amap)


def pro_curve(
    maps: Sequence[AnomalyMap | np.ndarray],
    masks: Sequence[np.ndarray],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Per-region-overlap against false-positive rate over a descending threshold sweep.

    A pixel is predicted anomalous when its score is >= the threshold. PRO is
    the mean over all ground-truth connected components (8-connectivity) of the
    fraction of the component that is predicted; FPR is the fraction of normal
    pixels that are predicted. All distinct scores are used as thresholds when
    there are at most 512 of them, otherwise 512 quantile-spaced thresholds.

    Returns:
        (fprs, pros, thresholds), ordered by descending threshold.

    Raises:
        InvalidInputError: If map and mask counts or shapes differ.
        UndefinedMetricError: If there are no anomalous or no normal pixels.
    """
    if len(maps) != len(masks):
        raise InvalidInputError(f"{len(maps)} maps but {len(masks)} masks")

    score_parts, region_parts, normal_parts = [], [], []
    n_components = 0
    for amap, mask in zip(maps, masks, strict=True):
        values = _map_values(amap)
        mask = np.asarray(mask)
        if values.shape != mask.shape:
            raise InvalidInputError(
                f"Map shape {values.shape} does not match mask shape {mask.shape}"
            )
        components = measure.label(mask > 0, connectivity=2)
        region_weight = np.zeros(mask.shape, dtype=np.float64)
        for region in measure.regionprops(components):
            region_weight[components == region.label] = 1.0 / region.area
        n_components += int(components.max())
        score_parts.append(values.astype(np.float64).ravel())
        region_parts.append(region_weight.ravel())
        normal_parts.append((mask == 0).ravel())

    if n_components == 0:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    scores = np.concatenate(score_parts)
    region_weights = np.concatenate(region_parts) / n_components
    normal = np.concatenate(normal_parts)
    n_normal = int(normal.sum())
    if n_normal == 0:
        raise UndefinedMetricError("PRO needs at least one normal pixel")

    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    cum_fp = np.cumsum(normal[order])
    cum_pro = np.cumsum(region_weights[order])

    distinct = np.unique(scores)[::-1]
    if distinct.size <= AUPRO_EXACT_MAX_THRESHOLDS:
        thresholds = distinct
    else:
        quantiles = np.linspace(1.0, 0.0, AUPRO_QUANTILE_THRESHOLDS)
        thresholds = np.unique(np.quantile(scores, quantiles))[::-1]

    # Number of pixels scoring >= t, for every threshold
    counts = np.searchsorted(-sorted_scores, -thresholds, side="right")
    fprs = np.where(counts > 0, cum_fp[counts - 1], 0) / n_normal
    pros = np.where(counts > 0, cum_pro[counts - 1], 0.0)
    return fprs.astype(np.float64), np.minimum(pros, 1.0), thresholds


def aupro(
    maps: Sequence[AnomalyMap | np.ndarray],
    masks: Sequence[np.ndarray],
    fpr_cap: float = 0.3,
) -> float:
    """
    Area under the PRO curve for FPR in [0, fpr_cap], divided by fpr_cap.

    The curve starts at (0, 0) and is linearly interpolated at the cap.

    Raises:
        ConfigError: If fpr_cap is outside (0, 1].
        UndefinedMetricError: If no anomalous pixel exists.
    """
    _check_fpr_cap(fpr_cap)
    fprs, pros, _ = pro_curve(maps, masks)
    return area_under_pro(fprs, pros, fpr_cap)


def _check_fpr_cap(fpr_cap: float) -> None:
    if not 0.0 < fpr_cap <= 1.0:
        raise ConfigError(f"metrics.fpr_cap must be in (0, 1], got {fpr_cap}")


def area_under_pro(fprs: np.ndarray, pros: np.ndarray, fpr_cap: float) -> float:
    """Normalized area of a PRO curve (ascending FPR) up to fpr_cap."""
    _check_fpr_cap(fpr_cap)
    fprs = np.concatenate([[0.0], fprs])
    pros = np.concatenate([[0.0], pros])

    inside = fprs <= fpr_cap
    x = fprs[inside]
    y = pros[inside]
    if x[-1] < fpr_cap:
        # The lowest threshold predicts every pixel, so some point has fpr = 1
        nxt = int(np.argmax(fprs > fpr_cap))
        x0, x1 = fprs[nxt - 1], fprs[nxt]
        y0, y1 = pros[nxt - 1], pros[nxt]
        y_cap = y0 + (y1 - y0) * (fpr_cap - x0) / (x1 - x0)
        x = np.append(x, fpr_cap)
        y = np.append(y, y_cap)
    return float(np.clip(auc(x, y) / fpr_cap, 0.0, 1.0))


def evaluate(
    network: GTransNetwork,
    samples: Sequence[ImageSample],
    config: RunConfig,
    lambdas: Sequence[float],
    device: torch.device | None = None,
    keep_layer_maps: bool = False,
) -> tuple[CategoryReport, list[AnomalyMap]]:
    """
    Score every test image and compute image AUROC, pixel AUROC and AUPRO.

    Returns:
        The category report and the anomaly maps in sample order.

    Raises:
        InvalidDataError: If `samples` is empty.
        UndefinedMetricError: If the test set lacks normal or anomalous samples.
    """
    if not samples:
        raise InvalidDataError("Evaluation needs at least one test image")

    maps = score_samples(
        network,
        samples,
        lambdas,
        mode=config.score.mode,
        sigma=config.score.sigma,
        weighting=config.score.weighting,
        batch_size=config.score.batch_size,
        device=device,
        keep_layer_maps=keep_layer_maps,
    )
    labels = [int(sample.is_anomalous) for sample in samples]
    masks = [sample.mask_or_zeros() for sample in samples]
    image_scores = [image_score(amap) for amap in maps]

    pixel_scores = np.concatenate([amap.values.ravel() for amap in maps])
    pixel_labels = np.concatenate([mask.ravel() for mask in masks])
    fprs, pros, thresholds = pro_curve(maps, masks)

    report = CategoryReport(
        category=samples[0].category,
        image_auroc=auroc(image_scores, labels),
        pixel_auroc=auroc(pixel_scores, pixel_labels),
        aupro=area_under_pro(fprs, pros, config.metrics.fpr_cap),
        n_images=len(samples),
        n_anomalous=sum(labels),
        n_pixels=int(pixel_labels.size),
        n_thresholds=int(thresholds.size),
    )
    logger.info(
        f"{report.category}: image AUROC {report.image_auroc:.4f}, "
        f"pixel AUROC {report.pixel_auroc:.4f}, AUPRO {report.aupro:.4f}"
    )
    return report, maps
