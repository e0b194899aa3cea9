"""
Ablation Sweeps - one experiment cell per value of a single axis, trained on
normal slices and scored on the validation split at the operating point.
"""

import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from localization.errors import ConfigurationError, DataError

from .config import ExperimentConfig, build_config, override, to_document
from .orchestrator import CHECKPOINT_NAME, ExperimentOrchestrator, score_model, train_run, training_images

# Configure logger for this module
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

ABLATION_SPLIT = "val"
ABLATION_REGIME = "op"

AXIS_FIELDS = {
    "p": "train.constraint.p",
    "t": "train.constraint.t",
    "lambda": "train.constraint.lambda",
    "cam_depth": "train.cam_depth",
    "constraint_kind": "train.constraint.kind",
    "recon_loss": "model.recon_loss",
    "latent_dim": "model.latent_dim",
}

DEFAULT_GRIDS: Dict[str, List[Any]] = {
    "p": [0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30],
    "t": [10.0, 15.0, 20.0, 25.0, 50.0],
    "lambda": [0.01, 0.1, 1.0, 10.0, 100.0],
    "cam_depth": [1, 2, 3, 4],
    "constraint_kind": ["log_barrier", "l2_image", "l2_pixel", "l1_expansion"],
    "recon_loss": ["bce", "l2", "ssim"],
    "latent_dim": [32, 128],
}

# Categorical axes are tabulated one row per value; numeric axes one column per value.
CATEGORICAL_AXES = ("constraint_kind", "recon_loss")
_CASTS = {"p": float, "t": float, "lambda": float, "cam_depth": int, "latent_dim": int}


def parse_values(axis: str, raw: Optional[str]) -> List[Any]:
    """Comma-separated grid override, e.g. "0.1,0.2"; None gives the default grid."""
    if axis not in AXIS_FIELDS:
        raise ConfigurationError(f"Unknown ablation axis {axis!r}; choose from {sorted(AXIS_FIELDS)}")
    if raw is None:
        return list(DEFAULT_GRIDS[axis])
    cast = _CASTS.get(axis, str)
    try:
        return [cast(v.strip()) for v in raw.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"Bad value list for axis {axis}: {raw!r}") from e


def cell_config(cfg: ExperimentConfig, axis: str, value: Any) -> ExperimentConfig:
    updates: Dict[str, Any] = {AXIS_FIELDS[axis]: value, "regimes": [ABLATION_REGIME]}
    if axis == "constraint_kind" and value != "log_barrier":
        updates["train.constraint.t_final"] = None
    return override(cfg, updates)


def run_cell(document: Dict[str, Any], cell_dir: str, device: str, force: bool) -> Dict[str, Any]:
    """Train every repetition of one cell and score it; runs in a worker process."""
    cfg = build_config(document)
    cell_path = Path(cell_dir)
    orchestrator = ExperimentOrchestrator(cfg, cell_path, force=force, device=device)
    samples = orchestrator.load_samples()
    images = training_images(samples, cfg.model)
    eval_samples = [s for s in samples if s.split == ABLATION_SPLIT]
    if not eval_samples:
        raise DataError(f"No {ABLATION_SPLIT} slices for the ablation")

    runs = [
        (orchestrator.guard(orchestrator.run_dir(i) / CHECKPOINT_NAME).parent, override(cfg, {"train.seed": cfg.train.seed + i}))
        for i in range(cfg.repetitions)
    ]
    reports = []
    for run_dir, run_cfg in runs:
        result, _ = train_run(run_cfg, images, run_dir, device)
        run_reports, _ = score_model(result.model, run_cfg, eval_samples, [], [ABLATION_REGIME])
        reports.extend(run_reports)
    cell = {
        "auprc": float(np.mean([r.auprc for r in reports])),
        "dice": float(np.mean([r.dice_dataset for r in reports])),
        "auroc": float(np.mean([r.auroc for r in reports])),
        "runs": len(reports),
    }
    (cell_path / "cell.json").write_text(json.dumps(cell, indent=2), encoding="utf-8")
    return cell


def tabulate(axis: str, values: Sequence[Any], cells: Sequence[Dict[str, Any]]) -> pd.DataFrame:
    frame = pd.DataFrame(
        {"AUPRC": [c["auprc"] for c in cells], "DICE": [c["dice"] for c in cells]},
        index=pd.Index(list(values), name=axis),
    )
    return frame if axis in CATEGORICAL_AXES else frame.T


def run_ablation(
    cfg: ExperimentConfig,
    axis: str,
    out_dir: Union[str, Path],
    values: Optional[Sequence[Any]] = None,
    workers: int = 1,
    force: bool = False,
    device: str = "cpu",
) -> Path:
    """Sweep one axis and write ablation_<axis>.csv and .json under out_dir.

    Returns:
        Path: The CSV table
    """
    if axis not in AXIS_FIELDS:
        raise ConfigurationError(f"Unknown ablation axis {axis!r}; choose from {sorted(AXIS_FIELDS)}")
    values = list(values) if values is not None else parse_values(axis, None)
    out_dir = Path(out_dir) / f"ablation_{axis}"
    table_path = out_dir / f"ablation_{axis}.csv"
    if table_path.exists() and not force:
        raise ConfigurationError(f"{table_path} already exists; pass --force to overwrite")

    logger.info(f"🚀 Ablation over {axis} with {len(values)} cell(s) and {workers} worker(s)")
    start_time = time.time()
    jobs = [
        (to_document(cell_config(cfg, axis, v)), str(out_dir / f"{axis}={v}"), device, force)
        for v in values
    ]
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                cells = list(executor.map(run_cell, *zip(*jobs)))
        else:
            cells = [run_cell(*job) for job in jobs]
    except Exception as e:
        logger.error(f"❌ Ablation over {axis} failed: {e}")
        raise

    table = tabulate(axis, values, cells)
    table.to_csv(table_path, float_format="%.4f")
    (out_dir / f"ablation_{axis}.json").write_text(
        json.dumps({"axis": axis, "split": ABLATION_SPLIT, "regime": ABLATION_REGIME,
                    "cells": [{"value": v, **c} for v, c in zip(values, cells)]}, indent=2),
        encoding="utf-8",
    )
    logger.info(f"✅ Ablation over {axis} finished in {time.time() - start_time:.2f}s\n{table.to_string()}")
    return table_path
