import pytest
import torch
import torch.nn as nn
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from localization.attention import (
    grad_cam,
    grad_cam_disentangled,
    inverted_attention,
    minmax_normalize,
)
from localization.constraints import ConstraintConfig, constraint_loss
from localization.errors import ConfigurationError
from localization.model import ConstrainedVAE, LatentStats, ModelConfig


class MeanEncoder(nn.Module):
    """One feature channel f = scale * x; z_mu is the spatial mean of f for every latent dim."""

    def __init__(self, latent_dim: int = 1):
        super().__init__()
        self.scale = nn.Parameter(torch.ones(1, dtype=torch.float64))
        self.latent_dim = latent_dim

    def encode(self, x):
        f = self.scale * x
        mu = f.mean(dim=(2, 3)).repeat(1, self.latent_dim)
        return LatentStats(mu=mu, logvar=torch.zeros_like(mu)), [f]


def test_toy_encoder_weights_are_inverse_area():
    x = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    attention = grad_cam(MeanEncoder(), x)
    assert torch.allclose(attention.weights.alpha, torch.full((2, 1), 1.0 / 16, dtype=torch.float64))
    assert torch.allclose(attention.raw, x / 16)
    assert torch.allclose(attention.values, torch.sigmoid(x / 16))


def test_constant_features_give_constant_map():
    x = torch.full((1, 1, 4, 4), 0.3, dtype=torch.float64)
    values = grad_cam(MeanEncoder(), x).values
    assert torch.allclose(values, values.flatten()[0].expand_as(values))


@pytest.mark.parametrize("depth", [1, 2, 3, 4])
def test_attention_matches_input_size_at_every_depth(depth):
    torch.manual_seed(0)
    model = ConstrainedVAE(ModelConfig())
    attention = grad_cam(model, torch.rand(1, 1, 64, 64), depth)
    assert attention.values.shape == attention.raw.shape == (1, 1, 64, 64)
    assert ((attention.values >= 0) & (attention.values <= 1)).all()
    assert attention.weights.alpha.shape == (1, model.config.encoder_widths[depth - 1])
    assert attention.source_depth == depth


@pytest.mark.parametrize("depth", [0, 3, "1"])
def test_invalid_depth_is_a_configuration_error(tiny_model, tiny_images, depth):
    with pytest.raises(ConfigurationError):
        grad_cam(tiny_model, tiny_images, depth)


def test_invalid_scalarization_is_a_configuration_error(tiny_model, tiny_images):
    with pytest.raises(ConfigurationError):
        grad_cam(tiny_model, tiny_images, scalarization=4)


def test_disentangled_with_one_latent_equals_single_component():
    torch.manual_seed(0)
    model = ConstrainedVAE(ModelConfig(latent_dim=1, input_size=8, encoder_widths=(4, 8)))
    x = torch.rand(2, 1, 8, 8)
    single = grad_cam(model, x, scalarization=0)
    combined = grad_cam_disentangled(model, x)
    assert torch.allclose(combined.raw, single.raw)
    assert torch.allclose(combined.values, single.values)


def test_disentangled_with_equal_gradients_equals_either_dimension():
    x = torch.rand(1, 1, 4, 4, dtype=torch.float64)
    encoder = MeanEncoder(latent_dim=2)
    combined = grad_cam_disentangled(encoder, x)
    first = grad_cam(encoder, x, scalarization=0)
    assert torch.allclose(combined.raw, first.raw)


def test_minmax_examples():
    grid = torch.tensor([[2.0, 4.0], [6.0, 3.0]])
    assert minmax_normalize(grid)[0, 1].item() == pytest.approx(0.5)
    assert torch.equal(minmax_normalize(torch.full((3, 3), 7.0)), torch.zeros(3, 3))
    bounded = torch.tensor([[0.0, 0.25], [1.0, 0.5]])
    assert torch.equal(minmax_normalize(bounded), bounded)


def test_minmax_is_per_image():
    batch = torch.stack([torch.arange(4.0).view(1, 2, 2), 10 * torch.arange(4.0).view(1, 2, 2)])
    normalized = minmax_normalize(batch)
    assert torch.allclose(normalized[0], normalized[1])
    assert normalized.amax(dim=(-2, -1)).flatten().tolist() == [1.0, 1.0]


def test_inverted_attention_complements_values(tiny_model, tiny_images):
    attention = grad_cam(tiny_model, tiny_images)
    assert torch.allclose(inverted_attention(attention) + attention.values, torch.ones_like(attention.values))


def test_create_graph_allows_backprop_through_attention(tiny_model, tiny_images):
    attention = grad_cam(tiny_model, tiny_images, create_graph=True)
    constraint_loss(attention.values, ConstraintConfig()).mean().backward()
    grad = tiny_model.encoder_blocks[0].conv1.weight.grad
    assert grad is not None and torch.isfinite(grad).all() and grad.abs().sum() > 0


class QuadraticEncoder(nn.Module):
    """Two feature channels (x, 1 - x); z_mu[d] = sum(W[d] * f^2), so dz/df varies per pixel."""

    def __init__(self, size: int = 4, latent_dim: int = 2):
        super().__init__()
        generator = torch.Generator().manual_seed(3)
        self.weight = torch.randn(latent_dim, 2, size, size, generator=generator, dtype=torch.float64)

    def features(self, x):
        return torch.cat([x, 1.0 - x], dim=1)

    def head(self, f):
        return (self.weight[None] * f[:, None] ** 2).sum(dim=(2, 3, 4))

    def encode(self, x):
        f = self.features(x)
        mu = self.head(f)
        return LatentStats(mu=mu, logvar=torch.zeros_like(mu)), [f]


def finite_difference_cam(encoder: QuadraticEncoder, x: torch.Tensor, h: float = 1e-6):
    f = encoder.features(x)
    grads = torch.zeros_like(f)
    for index in torch.cartesian_prod(*[torch.arange(n) for n in f.shape]):
        index = tuple(index.tolist())
        up, down = f.clone(), f.clone()
        up[index] += h
        down[index] -= h
        grads[index] = (encoder.head(up).sum() - encoder.head(down).sum()) / (2 * h)
    alpha = grads.mean(dim=(2, 3))
    return alpha, (alpha[:, :, None, None] * f).sum(dim=1, keepdim=True)


def test_grad_cam_matches_finite_differences():
    encoder = QuadraticEncoder()
    x = torch.rand(1, 1, 4, 4, dtype=torch.float64, generator=torch.Generator().manual_seed(5))
    attention = grad_cam(encoder, x)
    alpha, cam = finite_difference_cam(encoder, x)
    assert torch.allclose(attention.weights.alpha, alpha, atol=1e-7)
    assert torch.allclose(attention.raw, cam, atol=1e-7)


def test_grad_cam_is_deterministic(tiny_model, tiny_images):
    first = grad_cam(tiny_model, tiny_images)
    second = grad_cam(tiny_model, tiny_images)
    assert torch.equal(first.values, second.values)
    assert torch.equal(first.raw, second.raw)
    assert torch.equal(first.weights.alpha, second.weights.alpha)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False, allow_subnormal=False), min_size=9, max_size=9))
def test_minmax_output_spans_unit_interval(values):
    assume(max(values) > min(values))
    normalized = minmax_normalize(torch.tensor(values, dtype=torch.float64).view(3, 3))
    assert ((normalized >= 0) & (normalized <= 1)).all()
    assert normalized.min().item() == 0.0
    assert normalized.max().item() == 1.0
