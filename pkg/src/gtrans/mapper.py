import math

import torch
from torch import nn

from src.models import FeaturePyramid, ShapeError


class LayerMapper(nn.Module):
    """
    Cross-attention from pixels of one critical layer onto that layer's token block.

        F_M = F_T + T_v softmax(X_q^T T_k / sqrt(c))^T

    The value projection starts at zero, so an untrained mapper passes F_T through.
    """

    def __init__(self, channels: int, dim: int):
        super().__init__()
        self.channels = channels
        self.dim = dim
        self.query = nn.Conv2d(channels, channels, kernel_size=1)
        self.key = nn.Linear(dim, channels)
        self.value = nn.Linear(dim, channels)
        nn.init.zeros_(self.value.weight)
        nn.init.zeros_(self.value.bias)

    def forward(
        self,
        F_T_l: torch.Tensor,
        query_features: torch.Tensor,
        tokens: torch.Tensor,
        return_attention: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            F_T_l: (B, c, h, w) student features receiving the residual.
            query_features: (B, c, h, w) features the pixel queries are computed from.
            tokens: (B, d, n) token block of this layer.
            return_attention: Also return the (B, h*w, n) per-pixel token weights.
        """
        if F_T_l.shape != query_features.shape or F_T_l.shape[1] != self.channels:
            raise ShapeError(
                f"Mapper expects matching (B, {self.channels}, h, w) maps, got "
                f"{tuple(F_T_l.shape)} and {tuple(query_features.shape)}"
            )
        if tokens.ndim != 3 or tokens.shape[1] != self.dim:
            raise ShapeError(f"Expected (B, {self.dim}, n) tokens, got {tuple(tokens.shape)}")

        batch, channels, height, width = F_T_l.shape
        X_q = self.query(query_features).flatten(2)  # (B, c, hw)
        tokens_t = tokens.transpose(1, 2)  # (B, n, d)
        T_k = self.key(tokens_t).transpose(1, 2)  # (B, c, n)
        T_v = self.value(tokens_t).transpose(1, 2)  # (B, c, n)

        attention = (X_q.transpose(1, 2) @ T_k / math.sqrt(channels)).softmax(dim=-1)
        mapped = (T_v @ attention.transpose(1, 2)).view(batch, channels, height, width)
        out = F_T_l + mapped
        if return_attention:
            return out, attention
        return out


class Mapper(nn.Module):
    """One LayerMapper per critical layer; layer l reads token columns [l*g, (l+1)*g)."""

    def __init__(self, channels: list[int], dim: int, groups: int):
        super().__init__()
        self.groups = groups
        self.layers = nn.ModuleList(LayerMapper(c, dim) for c in channels)

    def forward(
        self,
        F_T: FeaturePyramid,
        query_pyramid: FeaturePyramid,
        tokens: torch.Tensor,
    ) -> FeaturePyramid:
        return map_pyramid(F_T, query_pyramid, tokens, self)


def map_layer(
    F_T_l: torch.Tensor,
    F_G_l: torch.Tensor,
    E_out: torch.Tensor,
    params: LayerMapper,
    layer_index: int,
    groups: int,
) -> torch.Tensor:
    """Map token block `layer_index` (0-based) of E_out onto that layer's pixel grid."""
    block = E_out[:, :, layer_index * groups : (layer_index + 1) * groups]
    if block.shape[2] != groups:
        raise ShapeError(f"Token tensor {tuple(E_out.shape)} has no block {layer_index}")
    out = params(F_T_l, F_G_l, block)
    assert isinstance(out, torch.Tensor)
    return out


def map_pyramid(
    F_T: FeaturePyramid,
    F_G: FeaturePyramid,
    E_out: torch.Tensor,
    params: Mapper,
) -> FeaturePyramid:
    """Apply map_layer per layer; the result is shape-identical to F_G."""
    if len(F_T) != len(F_G) or len(F_T) != len(params.layers):
        raise ShapeError(
            f"Pyramid lengths differ: student {len(F_T)}, query {len(F_G)}, "
            f"mapper {len(params.layers)}"
        )
    layers = [
        map_layer(F_T[i], F_G[i], E_out, params.layers[i], i, params.groups)
        for i in range(len(F_T))
    ]
    return FeaturePyramid(layers=layers, source="mapped")
