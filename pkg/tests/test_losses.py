import pytest
import torch

from src.gtrans.losses import pixel_loss, total_loss
from src.models import FeaturePyramid, ShapeError
from tests.conftest import random_pyramid

SHAPES = [(2, 3, 6, 5), (2, 4, 3, 3), (2, 5, 2, 2)]


def nested_pixel_loss(g: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    channels, height, width = g.shape
    out = torch.zeros(height, width, dtype=g.dtype)
    for i in range(height):
        for j in range(width):
            total = 0.0
            for k in range(channels):
                total += float(g[k, i, j] - m[k, i, j]) ** 2
            out[i, j] = 0.5 * total
    return out


def test_pixel_loss_identical_layers_is_zero():
    layer = torch.randn(4, 5, 6)
    assert torch.equal(pixel_loss(layer, layer.clone()), torch.zeros(5, 6))


def test_pixel_loss_single_pixel_example():
    g = torch.tensor([1.0, 2.0]).reshape(2, 1, 1)
    m = torch.tensor([1.0, 0.0]).reshape(2, 1, 1)
    assert pixel_loss(g, m).item() == pytest.approx(2.0)


def test_pixel_loss_matches_nested_loop_oracle():
    generator = torch.Generator().manual_seed(3)
    g = torch.randn(3, 4, 5, generator=generator, dtype=torch.float64)
    m = torch.randn(3, 4, 5, generator=generator, dtype=torch.float64)
    torch.testing.assert_close(pixel_loss(g, m), nested_pixel_loss(g, m), atol=1e-6, rtol=0)


def test_pixel_loss_is_batched_over_leading_axis():
    g = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    m = torch.randn(2, 3, 4, 4, dtype=torch.float64)
    batched = pixel_loss(g, m)
    assert batched.shape == (2, 4, 4)
    torch.testing.assert_close(batched[1], pixel_loss(g[1], m[1]))


def test_pixel_loss_shape_mismatch_raises():
    with pytest.raises(ShapeError):
        pixel_loss(torch.zeros(2, 3, 3), torch.zeros(2, 3, 4))


def test_total_loss_identical_pyramids_is_zero():
    pyramid = random_pyramid(SHAPES)
    assert total_loss(pyramid, pyramid.detach()).item() == 0.0


def test_total_loss_constant_offset_in_one_channel():
    delta = 0.7
    guide = random_pyramid(SHAPES)
    shifted = [layer.clone() for layer in guide.layers]
    shifted[1][:, 2] += delta
    mapped = FeaturePyramid(layers=shifted, source="mapped")
    assert total_loss(guide, mapped).item() == pytest.approx(delta**2 / 2, abs=1e-9)


def test_total_loss_matches_nested_loop_oracle():
    guide = random_pyramid(SHAPES, seed=1)
    mapped = random_pyramid(SHAPES, source="mapped", seed=2)

    expected = 0.0
    for b in range(2):
        for g, m in zip(guide.layers, mapped.layers, strict=True):
            loss_map = nested_pixel_loss(g[b], m[b])
            expected += float(loss_map.sum()) / (loss_map.shape[0] * loss_map.shape[1])
    expected /= 2

    assert total_loss(guide, mapped).item() == pytest.approx(expected, abs=1e-6)


def test_total_loss_per_sample_reduction():
    guide = random_pyramid(SHAPES, seed=4)
    mapped = random_pyramid(SHAPES, source="mapped", seed=5)
    per_sample = total_loss(guide, mapped, reduction="none")
    assert per_sample.shape == (2,)
    assert (per_sample >= 0).all()
    torch.testing.assert_close(per_sample.mean(), total_loss(guide, mapped))


def test_total_loss_rejects_unaligned_pyramids():
    guide = random_pyramid(SHAPES)
    short = FeaturePyramid(layers=guide.layers[:2], source="mapped")
    with pytest.raises(ShapeError):
        total_loss(guide, short)


def test_total_loss_gradient_reaches_only_the_mapped_pyramid():
    guide = random_pyramid(SHAPES, seed=6)
    mapped = random_pyramid(SHAPES, source="mapped", seed=7)
    for layer in guide.layers + mapped.layers:
        layer.requires_grad_(True)
    total_loss(guide, mapped).backward()
    assert all(layer.grad is None for layer in guide.layers)
    assert all(torch.count_nonzero(layer.grad) > 0 for layer in mapped.layers)
