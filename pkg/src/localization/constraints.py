"""
Constraint functionals - size constraint on attention maps, extended log-barrier,
and the penalty alternatives used as ablation baselines.

Every loss here takes a batch of attention maps shaped (B, 1, H, W) (a single
(H, W) or (1, H, W) map is treated as a batch of one) and returns one value per
image, so the training module decides how to reduce over the batch.
"""

import logging
import math
from typing import Literal, Optional, Union

import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigurationError, DomainError

logger = logging.getLogger(__name__)

ConstraintKind = Literal["log_barrier", "l2_image", "l2_pixel", "l1_expansion"]
CONSTRAINT_KINDS = ("log_barrier", "l2_image", "l2_pixel", "l1_expansion")


class ConstraintConfig(BaseModel):
    """Size-constraint hyperparameters: margin p, barrier sharpness t, weight lambda."""

    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    p: float = Field(0.2, ge=0.0, lt=1.0)
    t: float = Field(20.0, gt=0.0)
    lambda_: float = Field(10.0, ge=0.0, alias="lambda")
    kind: ConstraintKind = "log_barrier"
    # Linear schedule on t over the constrained phase; off when None.
    t_final: Optional[float] = Field(None, gt=0.0)

    @model_validator(mode="after")
    def _schedule_only_for_barrier(self) -> "ConstraintConfig":
        if self.t_final is not None and self.kind != "log_barrier":
            raise ConfigurationError(f"t_final only applies to kind=log_barrier, got kind={self.kind}")
        return self


def _as_batch(a: torch.Tensor) -> torch.Tensor:
    if a.dim() == 2:
        a = a.unsqueeze(0).unsqueeze(0)
    elif a.dim() == 3:
        a = a.unsqueeze(0)
    if a.dim() != 4 or a.shape[-1] * a.shape[-2] == 0 or a.shape[0] == 0:
        raise DomainError(f"attention map must be a non-empty (B, 1, H, W) grid, got shape {tuple(a.shape)}")
    return a


def size_constraint(a: torch.Tensor, p: float) -> torch.Tensor:
    """f_c(a) = (1 - mean(a)) - p, per image. Satisfied iff the result is <= 0."""
    a = _as_batch(a)
    return (1.0 - a.mean(dim=(1, 2, 3))) - p


def extended_log_barrier(z: Union[torch.Tensor, float], t: float) -> torch.Tensor:
    """Extended log-barrier.

    -(1/t) log(-z)                      if z <= -1/t^2
    t z - (1/t) log(1/t^2) + 1/t        otherwise

    Convex, continuous and C1; the log branch is evaluated on a clamped copy of z
    so the unused branch never produces non-finite values or gradients.
    """
    if t <= 0:
        raise DomainError(f"barrier sharpness t must be > 0, got {t}")
    if not torch.is_tensor(z):
        z = torch.tensor(z, dtype=torch.float64)
    breakpoint_z = -1.0 / (t * t)
    log_branch = -torch.log(-torch.clamp(z, max=breakpoint_z)) / t
    linear_branch = t * z - math.log(1.0 / (t * t)) / t + 1.0 / t
    return torch.where(z <= breakpoint_z, log_branch, linear_branch)


def barrier_size_loss(a: torch.Tensor, cfg: ConstraintConfig, t: Optional[float] = None) -> torch.Tensor:
    """Extended log-barrier applied to the size constraint of each map."""
    if cfg.kind != "log_barrier":
        raise ConfigurationError(f"barrier_size_loss requires kind=log_barrier, got {cfg.kind}")
    return extended_log_barrier(size_constraint(a, cfg.p), cfg.t if t is None else t)


def l2_penalty_image(a: torch.Tensor, p: float) -> torch.Tensor:
    """One-sided quadratic penalty max(0, f_c)^2 on the image-level constraint."""
    return torch.clamp(size_constraint(a, p), min=0.0) ** 2


def l2_penalty_pixel(a: torch.Tensor, p: float) -> torch.Tensor:
    """Per-pixel analogue: mean over pixels of max(0, (1 - a_l) - p)^2."""
    a = _as_batch(a)
    return (torch.clamp((1.0 - a) - p, min=0.0) ** 2).mean(dim=(1, 2, 3))


def l1_expansion_loss(a: torch.Tensor) -> torch.Tensor:
    """Pixel-wise expansion loss mean(1 - a)."""
    a = _as_batch(a)
    return (1.0 - a).mean(dim=(1, 2, 3))


def barrier_t_at(cfg: ConstraintConfig, progress: float) -> float:
    """Barrier sharpness at a fraction of the constrained phase (linear schedule)."""
    if cfg.t_final is None:
        return cfg.t
    progress = min(max(progress, 0.0), 1.0)
    return cfg.t + (cfg.t_final - cfg.t) * progress


def constraint_loss(a: torch.Tensor, cfg: ConstraintConfig, t: Optional[float] = None) -> torch.Tensor:
    """Per-image regularizer selected by cfg.kind."""
    if cfg.kind == "log_barrier":
        return barrier_size_loss(a, cfg, t)
    if cfg.kind == "l2_image":
        return l2_penalty_image(a, cfg.p)
    if cfg.kind == "l2_pixel":
        return l2_penalty_pixel(a, cfg.p)
    if cfg.kind == "l1_expansion":
        return l1_expansion_loss(a)
    raise ConfigurationError(f"Unknown constraint kind: {cfg.kind}")
