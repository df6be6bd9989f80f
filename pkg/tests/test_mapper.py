import math

import pytest
import torch
from torch import nn

from src.gtrans.mapper import LayerMapper, Mapper, map_layer, map_pyramid
from src.models import ShapeError
from tests.conftest import random_pyramid


def mapper_oracle(
    F_T_l: torch.Tensor, F_G_l: torch.Tensor, block: torch.Tensor, params: LayerMapper
) -> torch.Tensor:
    """Pixel-by-pixel mapped features for a single (c, h, w) map."""
    channels, height, width = F_T_l.shape
    w_q = params.query.weight[:, :, 0, 0]
    keys = params.key.weight @ block + params.key.bias[:, None]
    values = params.value.weight @ block + params.value.bias[:, None]

    out = F_T_l.clone()
    for i in range(height):
        for j in range(width):
            q = w_q @ F_G_l[:, i, j] + params.query.bias
            scores = [float(q @ keys[:, n]) / math.sqrt(channels) for n in range(block.shape[1])]
            peak = max(scores)
            exps = [math.exp(s - peak) for s in scores]
            out[:, i, j] += sum(e / sum(exps) * values[:, n] for n, e in enumerate(exps))
    return out


def test_fresh_mapper_is_identity_on_student_features():
    params = LayerMapper(channels=4, dim=6)
    F_T_l = torch.randn(2, 4, 5, 5)
    out = params(F_T_l, torch.randn(2, 4, 5, 5), torch.randn(2, 6, 3))
    torch.testing.assert_close(out, F_T_l)


def test_map_layer_matches_pixel_oracle():
    torch.manual_seed(0)
    params = LayerMapper(channels=3, dim=5).double()
    nn.init.normal_(params.value.weight)
    nn.init.normal_(params.value.bias)
    F_T_l = torch.randn(1, 3, 3, 4, dtype=torch.float64)
    F_G_l = torch.randn(1, 3, 3, 4, dtype=torch.float64)
    E_out = torch.randn(1, 5, 8, dtype=torch.float64)

    out = map_layer(F_T_l, F_G_l, E_out, params, layer_index=1, groups=4)
    expected = mapper_oracle(F_T_l[0], F_G_l[0], E_out[0, :, 4:8], params)
    torch.testing.assert_close(out[0], expected, atol=1e-6, rtol=0)


def test_pixel_attention_sums_to_one():
    params = LayerMapper(channels=4, dim=6)
    _, attention = params(
        torch.randn(2, 4, 3, 3), torch.randn(2, 4, 3, 3), torch.randn(2, 6, 5),
        return_attention=True,
    )
    assert attention.shape == (2, 9, 5)
    torch.testing.assert_close(attention.sum(dim=-1), torch.ones(2, 9))


def test_map_pyramid_preserves_guide_shapes():
    shapes = [(2, 4, 8, 8), (2, 6, 4, 4), (2, 8, 2, 2)]
    params = Mapper([4, 6, 8], dim=5, groups=2).double()
    guide = random_pyramid(shapes, seed=1)
    student = random_pyramid(shapes, source="student", seed=2)
    E_out = torch.randn(2, 5, 6, dtype=torch.float64)

    mapped = map_pyramid(student, guide, E_out, params)
    assert mapped.source == "mapped"
    assert mapped.shapes == guide.shapes


def test_map_layer_rejects_missing_token_block():
    params = LayerMapper(channels=3, dim=4)
    with pytest.raises(ShapeError):
        map_layer(torch.randn(1, 3, 2, 2), torch.randn(1, 3, 2, 2), torch.randn(1, 4, 4), params, 2, 2)


def test_mapper_rejects_mismatched_maps():
    params = LayerMapper(channels=3, dim=4)
    with pytest.raises(ShapeError):
        params(torch.randn(1, 3, 2, 2), torch.randn(1, 3, 4, 4), torch.randn(1, 4, 2))
