"""
Variational autoencoder - residual encoder exposing per-block feature maps,
symmetric residual decoder, the VAE loss terms and the checkpoint container.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError, DataError, NumericError, ShapeError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1
BCE_EPSILON = 1e-6
SSIM_WINDOW = 11
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

ReconLossKind = Literal["bce", "l2", "ssim"]


class ModelConfig(BaseModel):
    """Architecture and VAE-loss settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    latent_dim: int = Field(32, ge=1)
    input_size: int = Field(64, ge=4)
    encoder_widths: Tuple[int, ...] = (16, 32, 64, 128)
    recon_loss: ReconLossKind = "bce"
    beta: float = Field(1.0, ge=0.0)
    upsampling: Literal["interpolate", "transposed"] = "interpolate"

    @model_validator(mode="after")
    def _check_geometry(self) -> "ModelConfig":
        if len(self.encoder_widths) < 2:
            raise ConfigurationError("encoder_widths needs at least 2 blocks")
        if any(w < 1 for w in self.encoder_widths):
            raise ConfigurationError(f"encoder_widths must be positive, got {self.encoder_widths}")
        if self.input_size % (2 ** len(self.encoder_widths)) != 0:
            raise ConfigurationError(
                f"input_size={self.input_size} is not divisible by 2^{len(self.encoder_widths)}"
            )
        return self

    @property
    def depth(self) -> int:
        return len(self.encoder_widths)

    @property
    def bottleneck_size(self) -> int:
        return self.input_size // (2 ** self.depth)


@dataclass
class LatentStats:
    """Posterior statistics of q(z|x), each shaped (B, d)."""
    mu: torch.Tensor
    logvar: torch.Tensor


# One activation grid per encoder block, shallowest first: feature_stack[s - 1] is block s.
FeatureStack = List[torch.Tensor]


def _conv3x3(in_ch: int, out_ch: int, stride: int = 1) -> nn.Conv2d:
    return nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=stride, padding=1)


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a projected shortcut; stride 2 halves the grid."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        self.conv1 = _conv3x3(in_ch, out_ch, stride)
        self.conv2 = _conv3x3(out_ch, out_ch)
        self.shortcut = nn.Conv2d(in_ch, out_ch, kernel_size=1, stride=stride)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = F.silu(self.conv1(x))
        h = self.conv2(h)
        return F.silu(h + self.shortcut(x))


class UpBlock(nn.Module):
    """Doubles the grid (interpolation + conv, or transposed conv) then refines residually."""

    def __init__(self, in_ch: int, out_ch: int, upsampling: str):
        super().__init__()
        self.upsampling = upsampling
        if upsampling == "transposed":
            self.up = nn.ConvTranspose2d(in_ch, out_ch, kernel_size=4, stride=2, padding=1)
        else:
            self.up = _conv3x3(in_ch, out_ch)
        self.block = ResidualBlock(out_ch, out_ch)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.upsampling == "transposed":
            x = self.up(x)
        else:
            x = self.up(F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False))
        return self.block(F.silu(x))


class ConstrainedVAE(nn.Module):
    """Dense-latent VAE whose encoder blocks are the Grad-CAM attachment points."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = config.encoder_widths
        channels = (1,) + tuple(widths)
        self.encoder_blocks = nn.ModuleList(
            ResidualBlock(channels[i], channels[i + 1], stride=2) for i in range(len(widths))
        )
        flat = widths[-1] * config.bottleneck_size ** 2
        self.fc_mu = nn.Linear(flat, config.latent_dim)
        self.fc_logvar = nn.Linear(flat, config.latent_dim)

        self.fc_decode = nn.Linear(config.latent_dim, flat)
        reversed_widths = tuple(reversed(widths))
        up_channels = reversed_widths + (widths[0],)
        self.decoder_blocks = nn.ModuleList(
            UpBlock(up_channels[i], up_channels[i + 1], config.upsampling) for i in range(len(widths))
        )
        self.output_conv = nn.Conv2d(widths[0], 1, kernel_size=1)

    def _check_input(self, x: torch.Tensor) -> None:
        size = self.config.input_size
        if x.dim() != 4 or x.shape[1] != 1 or x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(f"expected input of shape (B, 1, {size}, {size}), got {tuple(x.shape)}")

    def encode(self, x: torch.Tensor) -> Tuple[LatentStats, FeatureStack]:
        """Posterior statistics plus every encoder block activation."""
        self._check_input(x)
        features: FeatureStack = []
        h = x
        for block in self.encoder_blocks:
            h = block(h)
            features.append(h)
        flat = torch.flatten(h, start_dim=1)
        return LatentStats(mu=self.fc_mu(flat), logvar=self.fc_logvar(flat)), features

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        if z.dim() != 2 or z.shape[1] != self.config.latent_dim:
            raise ShapeError(f"expected latent of shape (B, {self.config.latent_dim}), got {tuple(z.shape)}")
        side = self.config.bottleneck_size
        h = self.fc_decode(z).view(z.shape[0], self.config.encoder_widths[-1], side, side)
        for block in self.decoder_blocks:
            h = block(h)
        return torch.sigmoid(self.output_conv(h))

    def forward(self, x: torch.Tensor, noise: Optional[torch.Tensor] = None):
        stats, features = self.encode(x)
        if noise is None:
            noise = torch.randn_like(stats.mu)
        xhat = self.decode(reparameterize(stats, noise))
        return xhat, stats, features


def reparameterize(stats: LatentStats, noise: torch.Tensor) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * noise."""
    if noise.shape != stats.mu.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} does not match latent shape {tuple(stats.mu.shape)}")
    return stats.mu + torch.exp(0.5 * stats.logvar) * noise


def reconstruct(model: ConstrainedVAE, x: torch.Tensor) -> torch.Tensor:
    """Reconstruction from the posterior mean (noise = 0)."""
    stats, _ = model.encode(x)
    return model.decode(stats.mu)


def kl_divergence(stats: LatentStats) -> torch.Tensor:
    """KL(q(z|x) || N(0, I)) per image."""
    if not (torch.isfinite(stats.mu).all() and torch.isfinite(stats.logvar).all()):
        raise NumericError("non-finite latent statistics")
    return -0.5 * torch.sum(1.0 + stats.logvar - stats.mu.pow(2) - stats.logvar.exp(), dim=-1)


def _ssim_map(x: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    pool = lambda v: F.avg_pool2d(v, SSIM_WINDOW, stride=1, padding=SSIM_WINDOW // 2, count_include_pad=False)  # noqa: E731
    mu_x, mu_y = pool(x), pool(y)
    sigma_x = pool(x * x) - mu_x * mu_x
    sigma_y = pool(y * y) - mu_y * mu_y
    sigma_xy = pool(x * y) - mu_x * mu_y
    numerator = (2 * mu_x * mu_y + SSIM_C1) * (2 * sigma_xy + SSIM_C2)
    denominator = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sigma_x + sigma_y + SSIM_C2)
    return numerator / denominator


def reconstruction_loss(
    x: torch.Tensor,
    xhat: torch.Tensor,
    kind: ReconLossKind = "bce",
    reduction: Literal["mean", "sum"] = "mean",
) -> torch.Tensor:
    """Per-image reconstruction loss reduced over pixels.

    The per-pixel loss map is binary cross-entropy (xhat clamped to
    [1e-6, 1 - 1e-6]), squared error, or 1 - SSIM map; with reduction="mean"
    the ssim kind is exactly 1 - mean SSIM.
    """
    if x.shape != xhat.shape:
        raise ShapeError(f"reconstruction shape {tuple(xhat.shape)} does not match input {tuple(x.shape)}")
    if kind == "bce":
        xc = xhat.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON)
        per_pixel = -(x * torch.log(xc) + (1.0 - x) * torch.log(1.0 - xc))
    elif kind == "l2":
        per_pixel = (x - xhat) ** 2
    elif kind == "ssim":
        per_pixel = 1.0 - _ssim_map(x, xhat)
    else:
        raise ConfigurationError(f"Unknown reconstruction loss: {kind}")
    dims = tuple(range(1, x.dim()))
    return per_pixel.sum(dim=dims) if reduction == "sum" else per_pixel.mean(dim=dims)


def vae_loss(x: torch.Tensor, xhat: torch.Tensor, stats: LatentStats, cfg: ModelConfig) -> torch.Tensor:
    """Batch mean of reconstruction (summed over pixels) + beta * KL."""
    recon = reconstruction_loss(x, xhat, cfg.recon_loss, reduction="sum")
    return (recon + cfg.beta * kl_divergence(stats)).mean()


def save_checkpoint(path: Union[str, Path], model: ConstrainedVAE, extra: Optional[Dict[str, Any]] = None) -> Path:
    """Write the versioned checkpoint container."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {name: tensor.detach().clone() for name, tensor in model.state_dict().items()}
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": model.config.model_dump(mode="json"),
        "upsampling": model.config.upsampling,
        "state_dict": state,
        "parameter_shapes": {name: list(tensor.shape) for name, tensor in state.items()},
    }
    payload.update(extra or {})
    torch.save(payload, path)
    logger.info(f"💾 Checkpoint written: {path}")
    return path


def load_checkpoint(path: Union[str, Path], device: str = "cpu") -> Tuple[ConstrainedVAE, Dict[str, Any]]:
    """Rebuild the model from a checkpoint; returns the model and the raw payload."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location=device, weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"Unsupported checkpoint format_version={version} in {path}")
    config = ModelConfig(**payload["model_config"])
    model = ConstrainedVAE(config)
    for name, shape in payload["parameter_shapes"].items():
        if list(payload["state_dict"][name].shape) != shape:
            raise DataError(f"Parameter {name} has shape {list(payload['state_dict'][name].shape)}, expected {shape} in {path}")
    model.load_state_dict(payload["state_dict"])
    model.to(device)
    logger.info(f"📂 Checkpoint loaded: {path} (latent_dim={config.latent_dim}, blocks={config.depth})")
    return model, payload


def count_parameters(model: nn.Module) -> int:
    return sum(math.prod(p.shape) for p in model.parameters())
