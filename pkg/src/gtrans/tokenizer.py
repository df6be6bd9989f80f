import math

import torch
from torch import nn

from src.models import FeaturePyramid, ShapeError, TokenGroup


class LayerTokenizer(nn.Module):
    """
    Point-wise projections L_g (c -> g) and L_d (c -> d) of one critical layer.

    Each of the g semantic groups attends over all pixels; its token is the
    attention-weighted average of the d-dimensional projected pixels.
    """

    def __init__(self, in_channels: int, groups: int, dim: int):
        super().__init__()
        self.in_channels = in_channels
        self.to_groups = nn.Conv2d(in_channels, groups, kernel_size=1)
        self.to_values = nn.Conv2d(in_channels, dim, kernel_size=1)

    def forward(
        self,
        feature_map: torch.Tensor,
        return_attention: bool = False,
    ) -> torch.Tensor | tuple[torch.Tensor, torch.Tensor]:
        """
        Args:
            feature_map: (B, c, h, w) activations.
            return_attention: Also return the (B, g, h*w) spatial attention.

        Returns:
            (B, d, g) tokens.
        """
        if feature_map.ndim != 4 or feature_map.shape[1] != self.in_channels:
            raise ShapeError(
                f"Tokenizer expects {self.in_channels} channels, got {tuple(feature_map.shape)}"
            )
        logits = self.to_groups(feature_map).flatten(2) / math.sqrt(self.in_channels)
        attention = logits.softmax(dim=-1)
        values = self.to_values(feature_map).flatten(2)
        tokens = values @ attention.transpose(1, 2)
        if return_attention:
            return tokens, attention
        return tokens


class Tokenizer(nn.Module):
    """One LayerTokenizer per critical layer."""

    def __init__(
        self,
        channels: list[int],
        groups: int,
        dim: int,
        layer_order: list[int] | None = None,
    ):
        super().__init__()
        self.groups = groups
        self.dim = dim
        self.layer_order = layer_order or list(range(1, len(channels) + 1))
        self.layers = nn.ModuleList(LayerTokenizer(c, groups, dim) for c in channels)

    def forward(self, pyramid: FeaturePyramid) -> TokenGroup:
        return tokenize_pyramid(pyramid, self)


def tokenize_layer(feature_map: torch.Tensor, params: LayerTokenizer) -> torch.Tensor:
    """(B, c, h, w) feature map -> (B, d, g) visual tokens."""
    tokens = params(feature_map)
    assert isinstance(tokens, torch.Tensor)
    return tokens


def tokenize_pyramid(pyramid: FeaturePyramid, params: Tokenizer) -> TokenGroup:
    """Concatenate per-layer tokens along the group axis into (B, d, g*L)."""
    if len(pyramid) != len(params.layers):
        raise ShapeError(
            f"Pyramid has {len(pyramid)} layers, tokenizer has {len(params.layers)}"
        )
    blocks = [
        tokenize_layer(layer, layer_params)
        for layer, layer_params in zip(pyramid.layers, params.layers, strict=True)
    ]
    return TokenGroup(
        tokens=torch.cat(blocks, dim=2),
        groups=params.groups,
        layer_order=list(params.layer_order),
    )
