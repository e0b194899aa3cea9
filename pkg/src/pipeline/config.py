"""
Experiment Configuration - the single JSON document every command reads,
CLI overrides on top of it, and the resolved snapshot written next to outputs.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from localization.errors import ConfigurationError
from localization.metrics import METHODS, parse_regime
from localization.model import ModelConfig
from localization.training import TrainConfig
from support.synthetic_data import SynthConfig

logger = logging.getLogger(__name__)

CONFIG_SNAPSHOT = "config.json"
DEFAULT_REGIMES = ["fixed:0.5", "op", "percentile:95"]


class ExperimentConfig(BaseModel):
    """Dataset source, model, training and evaluation settings of one experiment."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    data: Optional[SynthConfig] = None
    manifest: Optional[str] = None
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    regimes: List[str] = Field(default_factory=lambda: list(DEFAULT_REGIMES), min_length=1)
    method: str = "attention"
    output_dir: str = "runs"
    repetitions: int = Field(3, ge=1)
    n_panels: int = Field(4, ge=0)
    erosion_radius: int = Field(1, ge=0)
    min_anomaly_fraction: float = Field(1e-4, ge=0.0, le=1.0)

    @model_validator(mode="before")
    @classmethod
    def _default_source(cls, values: Any) -> Any:
        if isinstance(values, dict) and values.get("data") is None and values.get("manifest") is None:
            values = {**values, "data": {}}
        return values

    @field_validator("regimes")
    @classmethod
    def _check_regimes(cls, regimes: List[str]) -> List[str]:
        for regime in regimes:
            parse_regime(regime)
        return regimes

    @field_validator("method")
    @classmethod
    def _check_method(cls, method: str) -> str:
        if method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {method!r}")
        return method

    @model_validator(mode="after")
    def _check_consistency(self) -> "ExperimentConfig":
        if self.data is not None and self.manifest is not None:
            raise ValueError("give either data (synthetic generator) or manifest, not both")
        if self.data is not None and self.data.image_size != self.model.input_size:
            raise ValueError(
                f"data.image_size={self.data.image_size} differs from model.input_size={self.model.input_size}"
            )
        if self.train.cam_depth > self.model.depth:
            raise ValueError(f"train.cam_depth={self.train.cam_depth} exceeds encoder depth {self.model.depth}")
        return self


def _describe(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in error.errors()
    )


def build_config(document: Mapping[str, Any]) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(dict(document))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid experiment configuration: {_describe(e)}") from e


def load_experiment(path: Optional[Union[str, Path]] = None) -> ExperimentConfig:
    """Parse an experiment JSON file; no path means all defaults."""
    if path is None:
        return build_config({})
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        document = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    logger.info(f"📁 Loaded experiment config {path}")
    return build_config(document)


def to_document(cfg: ExperimentConfig) -> Dict[str, Any]:
    return cfg.model_dump(mode="json", by_alias=True)


def override(cfg: ExperimentConfig, updates: Mapping[str, Any]) -> ExperimentConfig:
    """Apply dotted-key updates ("train.constraint.p": 0.1) and revalidate."""
    document = to_document(cfg)
    for dotted, value in updates.items():
        node = document
        *parents, leaf = dotted.split(".")
        for key in parents:
            if node.get(key) is None:
                node[key] = {}
            node = node[key]
        node[leaf] = value
    return build_config(document)


def apply_cli_overrides(
    cfg: ExperimentConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    constraint: Optional[str] = None,
    total_steps: Optional[int] = None,
    warmup_steps: Optional[int] = None,
    repetitions: Optional[int] = None,
    method: Optional[str] = None,
    regimes: Optional[List[str]] = None,
    manifest: Optional[str] = None,
) -> ExperimentConfig:
    """CLI flags win over config fields. constraint="none" makes every step a warm-up step."""
    updates: Dict[str, Any] = {}
    if seed is not None:
        updates["train.seed"] = seed
        if cfg.data is not None:
            updates["data.seed"] = seed
    if out is not None:
        updates["output_dir"] = out
    if total_steps is not None:
        updates["train.total_steps"] = total_steps
    if warmup_steps is not None:
        updates["train.warmup_steps"] = warmup_steps
    if repetitions is not None:
        updates["repetitions"] = repetitions
    if method is not None:
        updates["method"] = method
    if regimes:
        updates["regimes"] = list(regimes)
    if manifest is not None:
        updates["manifest"] = manifest
        updates["data"] = None
    if constraint is not None and constraint != "none":
        updates["train.constraint.kind"] = constraint
        if constraint != "log_barrier":
            updates["train.constraint.t_final"] = None
    if updates:
        cfg = override(cfg, updates)
    if constraint == "none":
        cfg = override(cfg, {"train.warmup_steps": cfg.train.total_steps})
    return cfg


def resolve_output_dir(output_dir: str) -> Path:
    """Relative output directories live under ANOMALY_OUTPUT_ROOT when it is set."""
    path = Path(output_dir)
    root = os.getenv("ANOMALY_OUTPUT_ROOT")
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def snapshot_config(cfg: ExperimentConfig, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_SNAPSHOT
    path.write_text(json.dumps(to_document(cfg), indent=2, sort_keys=True), encoding="utf-8")
    return path
