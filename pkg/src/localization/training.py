"""
Two-phase training - warm-up on the plain VAE loss, then the VAE loss plus the
weighted size regularizer on Grad-CAM attention maps.
"""

import copy
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .attention import cam_from_encoding, grad_cam
from .constraints import ConstraintConfig, barrier_t_at, constraint_loss, size_constraint
from .errors import ConfigurationError, NumericError
from .model import ConstrainedVAE, ModelConfig, count_parameters, reparameterize, vae_loss

# Configure logger for this module
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

NOISE_STREAM = 1
ORDER_STREAM = 2


class TrainConfig(BaseModel):
    """Optimization settings for one training run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    warmup_steps: int = Field(400, ge=0)
    total_steps: int = Field(4000, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-4, gt=0.0)
    adam_betas: Tuple[float, float] = (0.9, 0.999)
    constraint: ConstraintConfig = ConstraintConfig()
    cam_depth: int = Field(1, ge=1)
    seed: int = 0
    grad_clip_norm: Optional[float] = Field(None, gt=0.0)
    log_every: int = Field(50, ge=1)

    @model_validator(mode="after")
    def _check_phases(self) -> "TrainConfig":
        if self.warmup_steps > self.total_steps:
            raise ConfigurationError(
                f"warmup_steps={self.warmup_steps} exceeds total_steps={self.total_steps}"
            )
        return self


@dataclass
class TrainRecord:
    """One optimizer step."""
    step: int
    phase: str
    vae_loss: float
    size_loss: float
    coverage: float
    violation_fraction: float
    t: float
    wall_time: float


@dataclass
class TrainLog:
    records: List[TrainRecord] = field(default_factory=list)

    def append(self, record: TrainRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"TrainLog steps must increase: {record.step} after {self.records[-1].step}")
        self.records.append(record)

    def write_jsonl(self, path: Union[str, Path], append: bool = False) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "a" if append else "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
        return path

    @classmethod
    def read_jsonl(cls, path: Union[str, Path]) -> "TrainLog":
        log = cls()
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    log.append(TrainRecord(**json.loads(line)))
        return log


@dataclass
class LossBreakdown:
    """total is the optimized scalar; the rest are detached diagnostics."""
    total: torch.Tensor
    vae: float
    size: float
    coverage: float
    violation_fraction: float


@dataclass
class TrainResult:
    model: ConstrainedVAE
    log: TrainLog
    checkpoint_extra: Dict[str, Any]


def stream_seed(seed: int, stream: int, index: int) -> int:
    """Independent, reproducible seed for a (run, stream, index) triple."""
    return int(np.random.SeedSequence([seed, stream, index]).generate_state(1, dtype=np.uint64)[0] >> 1)


def step_noise(seed: int, step: int, shape: torch.Size, dtype: torch.dtype, device: str) -> torch.Tensor:
    generator = torch.Generator().manual_seed(stream_seed(seed, NOISE_STREAM, step))
    return torch.randn(shape, generator=generator, dtype=dtype).to(device)


def batch_indices(n_images: int, batch_size: int, seed: int, step: int) -> torch.Tensor:
    """Rows used at `step`: epoch-wise permutations seeded from the run seed."""
    per_epoch = max(1, n_images // batch_size)
    epoch, position = divmod(step, per_epoch)
    generator = torch.Generator().manual_seed(stream_seed(seed, ORDER_STREAM, epoch))
    order = torch.randperm(n_images, generator=generator)
    size = min(batch_size, n_images)
    return order[position * size:(position + 1) * size]


def total_loss(
    batch: torch.Tensor,
    model: ConstrainedVAE,
    cfg: TrainConfig,
    noise: Optional[torch.Tensor] = None,
    constrained: bool = True,
    t: Optional[float] = None,
    step: Optional[int] = None,
) -> LossBreakdown:
    """Batch-mean VAE loss plus lambda times the batch-mean size regularizer.

    With constrained=False (warm-up) the regularizer is only measured, never
    added, so it contributes nothing to the parameter update.
    """
    stats, features = model.encode(batch)
    if noise is None:
        noise = torch.randn_like(stats.mu)
    xhat = model.decode(reparameterize(stats, noise))
    vae = vae_loss(batch, xhat, stats, model.config)

    use_constraint = constrained and cfg.constraint.lambda_ > 0
    attention = cam_from_encoding(
        stats, features, cfg.cam_depth, tuple(batch.shape[-2:]), create_graph=use_constraint
    )
    values = attention.values if use_constraint else attention.values.detach()
    size = constraint_loss(values, cfg.constraint, t).mean()
    total = vae + cfg.constraint.lambda_ * size if use_constraint else vae

    if not torch.isfinite(total):
        raise NumericError(f"non-finite loss at step {step}: vae={vae.item()}, size={size.item()}", step=step)

    with torch.no_grad():
        violation = (size_constraint(values, cfg.constraint.p) > 0).float().mean().item()
    return LossBreakdown(
        total=total,
        vae=vae.item(),
        size=size.item(),
        coverage=values.mean().item(),
        violation_fraction=violation,
    )


def _snapshot(model: ConstrainedVAE, optimizer: torch.optim.Optimizer, step: int, cfg: TrainConfig) -> Dict[str, Any]:
    return {
        "step": step,
        "optimizer_state": copy.deepcopy(optimizer.state_dict()),
        "train_config": cfg.model_dump(mode="json", by_alias=True),
        "state_dict": {k: v.detach().clone() for k, v in model.state_dict().items()},
    }


def train(
    cfg: TrainConfig,
    images: torch.Tensor,
    model_config: Optional[ModelConfig] = None,
    resume_from: Optional[Dict[str, Any]] = None,
    device: str = "cpu",
) -> TrainResult:
    """Run warmup_steps VAE-only steps, then the constrained steps up to total_steps.

    images: normal training images shaped (N, 1, H, W). resume_from is a
    checkpoint payload; step numbering, data order and noise continue from it.
    """
    if images.shape[0] == 0:
        raise ConfigurationError("Training dataset is empty")
    model_config = model_config or ModelConfig()
    if cfg.cam_depth > model_config.depth:
        raise ConfigurationError(f"cam_depth={cfg.cam_depth} exceeds encoder depth {model_config.depth}")

    torch.use_deterministic_algorithms(True, warn_only=True)
    torch.manual_seed(cfg.seed)
    model = ConstrainedVAE(model_config).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, betas=cfg.adam_betas)
    start_step = 0
    if resume_from is not None:
        model.load_state_dict(resume_from["state_dict"])
        optimizer.load_state_dict(resume_from["optimizer_state"])
        start_step = int(resume_from["step"])
        logger.info(f"🔁 Resuming from step {start_step}")

    images = images.float().to(device)
    log = TrainLog()
    logger.info(
        f"🚀 Training {count_parameters(model)} parameters on {images.shape[0]} images: "
        f"warmup={cfg.warmup_steps}, total={cfg.total_steps}, kind={cfg.constraint.kind}, "
        f"p={cfg.constraint.p}, t={cfg.constraint.t}, lambda={cfg.constraint.lambda_}, depth={cfg.cam_depth}"
    )
    constrained_steps = max(1, cfg.total_steps - cfg.warmup_steps)
    started = time.time()

    for step in range(start_step, cfg.total_steps):
        constrained = step >= cfg.warmup_steps
        t = barrier_t_at(cfg.constraint, (step - cfg.warmup_steps) / constrained_steps) if constrained else cfg.constraint.t
        batch = images[batch_indices(images.shape[0], cfg.batch_size, cfg.seed, step).to(device)]
        noise = step_noise(cfg.seed, step, torch.Size((batch.shape[0], model_config.latent_dim)), batch.dtype, device)

        model.train()
        optimizer.zero_grad(set_to_none=True)
        try:
            losses = total_loss(batch, model, cfg, noise=noise, constrained=constrained, t=t, step=step + 1)
            losses.total.backward()
            grads_finite = all(torch.isfinite(p.grad).all() for p in model.parameters() if p.grad is not None)
            if not grads_finite:
                raise NumericError(f"non-finite gradients at step {step + 1}", step=step + 1)
        except NumericError as e:
            # Parameters and optimizer state are only updated after these checks pass.
            e.checkpoint = _snapshot(model, optimizer, step, cfg)
            logger.error(f"❌ Training diverged at step {step + 1}; last good step {step}: {e}")
            raise

        if cfg.grad_clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip_norm)
        optimizer.step()

        log.append(TrainRecord(
            step=step + 1,
            phase="constrained" if constrained else "warmup",
            vae_loss=losses.vae,
            size_loss=losses.size,
            coverage=losses.coverage,
            violation_fraction=losses.violation_fraction,
            t=t,
            wall_time=time.time() - started,
        ))
        if (step + 1) % cfg.log_every == 0 or step + 1 == cfg.total_steps:
            logger.info(
                f"📊 step {step + 1}/{cfg.total_steps} [{log.records[-1].phase}] "
                f"vae={losses.vae:.2f} size={losses.size:.4f} coverage={losses.coverage:.3f} "
                f"violations={losses.violation_fraction:.2f}"
            )

    logger.info(f"✅ Training finished in {time.time() - started:.2f}s")
    extra = {k: v for k, v in _snapshot(model, optimizer, cfg.total_steps, cfg).items() if k != "state_dict"}
    return TrainResult(model=model, log=log, checkpoint_extra=extra)


def constraint_satisfaction(
    model: ConstrainedVAE,
    images: torch.Tensor,
    cfg: TrainConfig,
    tolerance: float = 0.0,
    batch_size: int = 64,
) -> Tuple[float, float]:
    """Mean attention coverage and fraction of images with f_c <= tolerance."""
    model.eval()
    coverages, satisfied = [], []
    for start in range(0, images.shape[0], batch_size):
        batch = images[start:start + batch_size]
        values = grad_cam(model, batch, cfg.cam_depth).values.detach()
        coverages.append(values.mean(dim=(1, 2, 3)))
        satisfied.append(size_constraint(values, cfg.constraint.p) <= tolerance)
    coverage = torch.cat(coverages).mean().item()
    fraction = torch.cat(satisfied).float().mean().item()
    logger.info(f"📊 Constraint check: coverage={coverage:.3f}, satisfied={fraction:.2%} (tol={tolerance})")
    return coverage, fraction
