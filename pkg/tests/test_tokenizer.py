import math

import pytest
import torch
from torch import nn

from src.gtrans.tokenizer import LayerTokenizer, Tokenizer, tokenize_layer, tokenize_pyramid
from src.models import FeaturePyramid, ShapeError
from tests.conftest import random_pyramid


def tokenizer_oracle(feature_map: torch.Tensor, params: LayerTokenizer) -> torch.Tensor:
    """Loop-level tokens for a single (c, h, w) map."""
    channels, height, width = feature_map.shape
    w_g = params.to_groups.weight[:, :, 0, 0]
    b_g = params.to_groups.bias
    w_d = params.to_values.weight[:, :, 0, 0]
    b_d = params.to_values.bias
    pixels = [feature_map[:, i, j] for i in range(height) for j in range(width)]

    tokens = torch.zeros(w_d.shape[0], w_g.shape[0], dtype=feature_map.dtype)
    for group in range(w_g.shape[0]):
        logits = [(w_g[group] @ x + b_g[group]) / math.sqrt(channels) for x in pixels]
        peak = max(float(v) for v in logits)
        exps = [math.exp(float(v) - peak) for v in logits]
        norm = sum(exps)
        for weight, x in zip(exps, pixels, strict=True):
            tokens[:, group] += (weight / norm) * (w_d @ x + b_d)
    return tokens


def test_tokenize_layer_shape():
    params = LayerTokenizer(in_channels=6, groups=4, dim=10)
    tokens = tokenize_layer(torch.randn(3, 6, 5, 7), params)
    assert tokens.shape == (3, 10, 4)


def test_tokenize_layer_matches_loop_oracle():
    torch.manual_seed(0)
    params = LayerTokenizer(in_channels=5, groups=3, dim=4).double()
    feature_map = torch.randn(2, 5, 3, 4, dtype=torch.float64)
    tokens = tokenize_layer(feature_map, params)
    for b in range(2):
        torch.testing.assert_close(
            tokens[b], tokenizer_oracle(feature_map[b], params), atol=1e-6, rtol=0
        )


def test_spatial_attention_sums_to_one():
    params = LayerTokenizer(in_channels=6, groups=4, dim=8)
    _, attention = params(torch.randn(2, 6, 5, 5), return_attention=True)
    assert attention.shape == (2, 4, 25)
    torch.testing.assert_close(attention.sum(dim=-1), torch.ones(2, 4))


def test_constant_map_gives_projected_pixel_tokens():
    params = LayerTokenizer(in_channels=3, groups=2, dim=5).double()
    pixel = torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64)
    feature_map = pixel.reshape(1, 3, 1, 1).expand(1, 3, 4, 4).contiguous()
    expected = params.to_values.weight[:, :, 0, 0] @ pixel + params.to_values.bias
    tokens = tokenize_layer(feature_map, params)
    for group in range(2):
        torch.testing.assert_close(tokens[0, :, group], expected, atol=1e-10, rtol=0)


def test_tokenize_pyramid_concatenates_groups():
    shapes = [(2, 4, 8, 8), (2, 6, 4, 4), (2, 8, 2, 2)]
    params = Tokenizer([4, 6, 8], groups=3, dim=5).double()
    pyramid = random_pyramid(shapes)
    token_group = tokenize_pyramid(pyramid, params)

    assert token_group.tokens.shape == (2, 5, 9)
    assert token_group.groups == 3
    assert token_group.layer_order == [1, 2, 3]
    torch.testing.assert_close(
        token_group.tokens[:, :, 3:6], tokenize_layer(pyramid[1], params.layers[1])
    )


def test_tokens_ignore_pixel_order():
    params = LayerTokenizer(in_channels=4, groups=3, dim=6).double()
    feature_map = torch.randn(2, 4, 5, 7, dtype=torch.float64)
    perm = torch.randperm(35, generator=torch.Generator().manual_seed(3))
    shuffled = feature_map.flatten(2)[:, :, perm].reshape(2, 4, 5, 7)
    torch.testing.assert_close(
        tokenize_layer(shuffled, params), tokenize_layer(feature_map, params), atol=1e-10, rtol=0
    )


def test_layer_order_permutes_token_blocks():
    shapes = [(2, 4, 8, 8), (2, 6, 4, 4), (2, 8, 2, 2)]
    params = Tokenizer([4, 6, 8], groups=3, dim=5).double()
    pyramid = random_pyramid(shapes)
    order = [2, 0, 1]

    permuted_params = Tokenizer([8, 4, 6], groups=3, dim=5, layer_order=[3, 1, 2]).double()
    permuted_params.layers = nn.ModuleList(params.layers[i] for i in order)
    permuted = FeaturePyramid(layers=[pyramid[i] for i in order], source="guide")

    original = tokenize_pyramid(pyramid, params)
    reordered = tokenize_pyramid(permuted, permuted_params)
    assert reordered.layer_order == [3, 1, 2]
    for position, layer in enumerate(order):
        torch.testing.assert_close(
            reordered.tokens[:, :, position * 3 : (position + 1) * 3],
            original.tokens[:, :, layer * 3 : (layer + 1) * 3],
        )


def test_tokenizer_rejects_wrong_channels():
    params = LayerTokenizer(in_channels=6, groups=4, dim=8)
    with pytest.raises(ShapeError):
        params(torch.randn(2, 5, 4, 4))


def test_tokenize_pyramid_rejects_layer_count_mismatch():
    params = Tokenizer([4, 6], groups=2, dim=4)
    pyramid = FeaturePyramid(layers=[torch.randn(1, 4, 4, 4)], source="guide")
    with pytest.raises(ShapeError):
        tokenize_pyramid(pyramid, params)
