from typing import Literal

import torch

from src.models import FeaturePyramid, ShapeError


def _check_aligned(F_G_l: torch.Tensor, F_M_l: torch.Tensor) -> None:
    if F_G_l.shape != F_M_l.shape:
        raise ShapeError(
            f"Guide layer {tuple(F_G_l.shape)} and mapped layer "
            f"{tuple(F_M_l.shape)} differ"
        )
    if F_G_l.ndim not in (3, 4):
        raise ShapeError(f"Expected (c, h, w) or (B, c, h, w), got {tuple(F_G_l.shape)}")


def pixel_loss(F_G_l: torch.Tensor, F_M_l: torch.Tensor) -> torch.Tensor:
    """
    Half squared L2 distance per pixel, reduced over the channel axis.

    Args:
        F_G_l: (c, h, w) or (B, c, h, w) guide features.
        F_M_l: Mapped student features of the same shape.

    Returns:
        (h, w) or (B, h, w) non-negative map.
    """
    _check_aligned(F_G_l, F_M_l)
    return 0.5 * (F_G_l - F_M_l).pow(2).sum(dim=-3)


def total_loss(
    F_G: FeaturePyramid,
    F_M: FeaturePyramid,
    reduction: Literal["mean", "none"] = "mean",
) -> torch.Tensor:
    """
    Multiresolution distillation loss: per layer, the pixel loss averaged over
    that layer's grid, summed over layers. The guide is a fixed target.

    Args:
        F_G: Guide pyramid.
        F_M: Mapped student pyramid.
        reduction: "mean" averages over the batch, "none" returns (B,) losses.
    """
    if len(F_G) != len(F_M):
        raise ShapeError(f"Pyramid lengths differ: {len(F_G)} vs {len(F_M)}")
    per_layer = [
        pixel_loss(g, m).flatten(-2).mean(dim=-1)
        for g, m in zip(F_G.detach().layers, F_M.layers, strict=True)
    ]
    per_sample = torch.stack(per_layer).sum(dim=0)
    if reduction == "none":
        return per_sample
    return per_sample.mean()
