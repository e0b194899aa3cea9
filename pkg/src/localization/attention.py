"""
Grad-CAM attention from the latent mean vector onto an encoder block.

Maps are built with torch.autograd.grad(create_graph=True) on the block
activations, so the training loss can differentiate through the gradients
themselves (double backprop).
"""

import logging
from dataclasses import dataclass
from typing import Protocol, Tuple, Union

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, NumericError

logger = logging.getLogger(__name__)

Scalarization = Union[str, int]


class EncodesFeatures(Protocol):
    """Anything exposing encode(x) -> (stats with .mu, list of block activations)."""

    def encode(self, x: torch.Tensor) -> Tuple[object, list]:
        ...


@dataclass
class CamWeights:
    """alpha_k per image and channel, shaped (B, K)."""
    alpha: torch.Tensor


@dataclass
class AttentionMap:
    """Attention over the image grid.

    values: squashed map in [0, 1], shaped (B, 1, H, W)
    raw: weighted channel sum before squashing, upsampled to (B, 1, H, W)
    """
    values: torch.Tensor
    raw: torch.Tensor
    source_depth: int
    weights: CamWeights


def _block_features(model: EncodesFeatures, x: torch.Tensor, depth: int):
    stats, features = model.encode(x)
    if not isinstance(depth, int) or depth < 1 or depth > len(features):
        raise ConfigurationError(f"CAM depth must be in 1..{len(features)}, got {depth}")
    return stats, features[depth - 1]


def _cam_from_target(target: torch.Tensor, features: torch.Tensor, create_graph: bool) -> Tuple[torch.Tensor, torch.Tensor]:
    grads = torch.autograd.grad(target, features, create_graph=create_graph, retain_graph=True)[0]
    if not torch.isfinite(grads).all():
        raise NumericError("non-finite Grad-CAM gradients")
    # Spatial mean over the feature grid.
    alpha = grads.mean(dim=(2, 3))
    cam = (alpha[:, :, None, None] * features).sum(dim=1, keepdim=True)
    return alpha, cam


def _finish(cam: torch.Tensor, alpha: torch.Tensor, size: Tuple[int, int], depth: int) -> AttentionMap:
    values = F.interpolate(torch.sigmoid(cam), size=size, mode="bilinear", align_corners=False)
    raw = F.interpolate(cam, size=size, mode="bilinear", align_corners=False)
    return AttentionMap(values=values, raw=raw, source_depth=depth, weights=CamWeights(alpha=alpha))


def cam_from_encoding(
    stats,
    features: list,
    depth: int,
    image_size: Tuple[int, int],
    scalarization: Scalarization = "sum",
    create_graph: bool = False,
) -> AttentionMap:
    """Grad-CAM from an encoding already computed, e.g. by the training forward pass."""
    if not isinstance(depth, int) or depth < 1 or depth > len(features):
        raise ConfigurationError(f"CAM depth must be in 1..{len(features)}, got {depth}")
    if scalarization == "sum":
        target = stats.mu.sum()
    elif isinstance(scalarization, int) and not isinstance(scalarization, bool) and 0 <= scalarization < stats.mu.shape[1]:
        target = stats.mu[:, scalarization].sum()
    else:
        raise ConfigurationError(f"Invalid scalarization: {scalarization!r}")
    alpha, cam = _cam_from_target(target, features[depth - 1], create_graph)
    return _finish(cam, alpha, image_size, depth)


def grad_cam(
    model: EncodesFeatures,
    x: torch.Tensor,
    depth: int = 1,
    scalarization: Scalarization = "sum",
    create_graph: bool = False,
) -> AttentionMap:
    """Grad-CAM of z_mu onto encoder block `depth` (1-based).

    scalarization="sum" backpropagates sum_d z_mu[d]; an integer backpropagates
    that single latent component. Pass create_graph=True when the map feeds a
    training loss.
    """
    with torch.enable_grad():
        stats, features = model.encode(x)
        return cam_from_encoding(stats, features, depth, tuple(x.shape[-2:]), scalarization, create_graph)


def grad_cam_disentangled(
    model: EncodesFeatures,
    x: torch.Tensor,
    depth: int = 1,
    create_graph: bool = False,
) -> AttentionMap:
    """One CAM per latent dimension, combined by element-wise mean before squashing."""
    with torch.enable_grad():
        stats, features = _block_features(model, x, depth)
        cams, alphas = [], []
        for d in range(stats.mu.shape[1]):
            alpha, cam = _cam_from_target(stats.mu[:, d].sum(), features, create_graph)
            alphas.append(alpha)
            cams.append(cam)
        cam = torch.stack(cams, dim=0).mean(dim=0)
        alpha = torch.stack(alphas, dim=0).mean(dim=0)
    return _finish(cam, alpha, tuple(x.shape[-2:]), depth)


def minmax_normalize(raw: torch.Tensor) -> torch.Tensor:
    """(v - min) / (max - min) over the last two dims; constant grids map to zeros."""
    lo = raw.amin(dim=(-2, -1), keepdim=True)
    hi = raw.amax(dim=(-2, -1), keepdim=True)
    span = hi - lo
    safe = torch.where(span > 0, span, torch.ones_like(span))
    return torch.where(span > 0, (raw - lo) / safe, torch.zeros_like(raw))


def inverted_attention(attention: AttentionMap) -> torch.Tensor:
    """1 - squashed CAM, the expansion-loss baseline's anomaly map."""
    return 1.0 - attention.values
