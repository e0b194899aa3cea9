"""
Experiment Orchestrator - runs the synth, train, eval and report stages of an
experiment and owns its output directory layout.

Layout under the output directory:
    data/manifest.json, data/images/..., data/masks/...
    run_<i>/checkpoint.pt, run_<i>/train_log.jsonl, run_<i>/config.json
    run_<i>/last_good.pt (only after a diverged run)
    run_<i>/eval/<method>/<regime>.json, run_<i>/eval/<method>/panels/...
    report.csv, report.txt, report.json
"""

import logging
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import torch

from localization.errors import ConfigurationError, DataError, NumericError
from localization.inference import AnomalyMap, save_saliency, threshold_fixed
from localization.metrics import EvalReport, evaluate_maps, parse_regime, saliency_maps
from localization.model import ConstrainedVAE, ModelConfig, load_checkpoint, save_checkpoint
from localization.training import TrainConfig, TrainResult, constraint_satisfaction, train
from support.imaging import save_panel
from support.slice_dataset import (
    Sample,
    export_dataset,
    filter_small_anomalies,
    load_dataset,
    split_samples,
    stack_images,
)
from support.synthetic_data import generate_synthetic

from .config import ExperimentConfig, override, snapshot_config
from .report import write_report

# Configure logger for this module
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

CHECKPOINT_NAME = "checkpoint.pt"
LAST_GOOD_NAME = "last_good.pt"
TRAIN_LOG_NAME = "train_log.jsonl"


@dataclass
class StageResult:
    """Outcome of one orchestrated stage."""
    stage: str
    execution_time: float
    success: bool
    outputs: List[Path]
    error: Optional[str] = None


def regime_slug(regime: str) -> str:
    return regime.replace(":", "_")


def training_images(samples: Sequence[Sample], model_config: ModelConfig) -> torch.Tensor:
    """Normal training slices as an (N, 1, S, S) float tensor."""
    train_samples = split_samples(samples, "train")
    if not train_samples:
        raise ConfigurationError("Training dataset is empty")
    images = stack_images(train_samples)
    if images.shape[-1] != model_config.input_size or images.shape[-2] != model_config.input_size:
        raise ConfigurationError(
            f"slices are {images.shape[-2]}x{images.shape[-1]} but model.input_size={model_config.input_size}"
        )
    return torch.from_numpy(images)


def train_run(
    cfg: ExperimentConfig,
    images: torch.Tensor,
    run_dir: Path,
    device: str = "cpu",
    resume_from: Optional[Dict[str, Any]] = None,
) -> Tuple[TrainResult, Path]:
    """Train one seeded run and write its checkpoint, log and config snapshot.

    On divergence the last finite state is written to last_good.pt before the
    error propagates.
    """
    try:
        result = train(cfg.train, images, cfg.model, resume_from=resume_from, device=device)
    except NumericError as e:
        if e.checkpoint is not None:
            model = ConstrainedVAE(cfg.model)
            model.load_state_dict(e.checkpoint["state_dict"])
            extra = {k: v for k, v in e.checkpoint.items() if k != "state_dict"}
            path = save_checkpoint(run_dir / LAST_GOOD_NAME, model, extra=extra)
            logger.error(f"❌ Run {run_dir.name} diverged; last good step {extra['step']} saved to {path}")
        raise
    checkpoint = save_checkpoint(run_dir / CHECKPOINT_NAME, result.model, extra=result.checkpoint_extra)
    result.log.write_jsonl(run_dir / TRAIN_LOG_NAME, append=resume_from is not None)
    snapshot_config(cfg, run_dir)
    coverage, satisfied = constraint_satisfaction(result.model, images.to(device), cfg.train, tolerance=0.05)
    logger.info(f"📊 Run {run_dir.name}: coverage={coverage:.3f}, f_c <= 0.05 on {satisfied:.1%} of training images")
    return result, checkpoint


def score_model(
    model,
    cfg: ExperimentConfig,
    eval_samples: Sequence[Sample],
    normal_samples: Sequence[Sample],
    regimes: Optional[Sequence[str]] = None,
) -> Tuple[List[EvalReport], List[AnomalyMap]]:
    """Saliency once per image, then one report per threshold regime."""
    regimes = list(regimes or cfg.regimes)
    depth = cfg.train.cam_depth
    maps = saliency_maps(model, eval_samples, cfg.method, depth, cfg.erosion_radius)
    normal_maps = None
    if any(parse_regime(r)[0] == "percentile" for r in regimes):
        normal_maps = saliency_maps(model, normal_samples, cfg.method, depth, cfg.erosion_radius)
    gts = [s.anomaly_mask for s in eval_samples]
    scan_ids = [s.scan_id for s in eval_samples]
    reports = [
        evaluate_maps(maps, gts, scan_ids, regime, normal_maps=normal_maps, method=cfg.method)
        for regime in regimes
    ]
    return reports, maps


class ExperimentOrchestrator:
    """Coordinates the experiment stages over one output directory."""

    def __init__(self, config: ExperimentConfig, output_dir: Path, force: bool = False, device: Optional[str] = None):
        """Initialize the orchestrator.

        Args:
            config: Resolved experiment configuration
            output_dir: Directory that owns every artifact of the experiment
            force: Overwrite existing artifacts instead of refusing
            device: Torch device; defaults to ANOMALY_DEVICE or cpu
        """
        self.config = config
        self.output_dir = Path(output_dir)
        self.force = force
        self.device = device or os.getenv("ANOMALY_DEVICE", "cpu")
        self.stage_results: List[StageResult] = []
        logger.info(f"🚀 Experiment orchestrator ready: {self.output_dir} (device={self.device})")

    def guard(self, path: Path) -> Path:
        if path.exists() and not self.force:
            raise ConfigurationError(f"{path} already exists; pass --force to overwrite")
        return path

    def _run_stage(self, stage: str, work: Callable[[], List[Path]]) -> List[Path]:
        """Run a stage with timing and error reporting; failures are logged and re-raised."""
        logger.info(f"🎯 Stage {stage} starting")
        start_time = time.time()
        try:
            outputs = work()
        except Exception as e:
            elapsed = time.time() - start_time
            self.stage_results.append(StageResult(stage, elapsed, False, [], str(e)))
            logger.error(f"❌ Stage {stage} failed after {elapsed:.2f}s: {e}")
            raise
        elapsed = time.time() - start_time
        self.stage_results.append(StageResult(stage, elapsed, True, outputs))
        logger.info(f"✅ Stage {stage} completed in {elapsed:.2f}s ({len(outputs)} artifact(s))")
        return outputs

    @property
    def data_dir(self) -> Path:
        return self.output_dir / "data"

    def run_dir(self, index: int) -> Path:
        return self.output_dir / f"run_{index}"

    def load_samples(self) -> List[Sample]:
        """Dataset of the experiment: a manifest if configured or already synthesized, else generated in memory."""
        if self.config.manifest is not None:
            samples = load_dataset(self.config.manifest)
        elif (self.data_dir / "manifest.json").exists():
            samples = load_dataset(self.data_dir / "manifest.json")
        else:
            samples = generate_synthetic(self.config.data)
        return filter_small_anomalies(samples, self.config.min_anomaly_fraction)

    def synthesize(self) -> Path:
        """Generate the synthetic benchmark and export it.

        Returns:
            Path: The manifest of the written dataset
        """
        if self.config.data is None:
            raise ConfigurationError("synth needs a data section; this experiment reads a manifest")

        def work() -> List[Path]:
            self.guard(self.data_dir / "manifest.json")
            samples = generate_synthetic(self.config.data)
            manifest = export_dataset(samples, self.data_dir)
            snapshot_config(self.config, self.data_dir)
            return [manifest]

        return self._run_stage("synth", work)[0]

    def train(self) -> List[Path]:
        """Train `repetitions` runs with seeds s, s+1, ...

        Returns:
            List[Path]: One checkpoint per run
        """

        def work() -> List[Path]:
            samples = self.load_samples()
            images = training_images(samples, self.config.model)
            # Every run is validated before the first one trains.
            runs = []
            for i in range(self.config.repetitions):
                run_dir = self.run_dir(i)
                self.guard(run_dir / CHECKPOINT_NAME)
                runs.append((run_dir, override(self.config, {"train.seed": self.config.train.seed + i})))
            checkpoints = []
            for i, (run_dir, run_cfg) in enumerate(runs):
                logger.info(f"🔧 Run {i + 1}/{self.config.repetitions} with seed {run_cfg.train.seed}")
                _, checkpoint = train_run(run_cfg, images, run_dir, self.device)
                checkpoints.append(checkpoint)
            return checkpoints

        return self._run_stage("train", work)

    def resume(self, checkpoint: Path) -> Path:
        """Continue a run from its checkpoint up to the configured total_steps.

        The stored training settings are kept; only total_steps comes from the
        current configuration. The log is appended in place.
        """

        def work() -> List[Path]:
            _, payload = load_checkpoint(checkpoint, self.device)
            if "optimizer_state" not in payload:
                raise DataError(f"Checkpoint {checkpoint} carries no optimizer state to resume from")
            stored = TrainConfig.model_validate(payload["train_config"])
            if self.config.train.total_steps <= int(payload["step"]):
                raise ConfigurationError(
                    f"total_steps={self.config.train.total_steps} does not extend the run past step {payload['step']}"
                )
            train_cfg = stored.model_copy(update={"total_steps": self.config.train.total_steps})
            run_cfg = override(self.config, {
                "model": payload["model_config"],
                "train": train_cfg.model_dump(mode="json", by_alias=True),
            })
            images = training_images(self.load_samples(), run_cfg.model)
            _, path = train_run(run_cfg, images, Path(checkpoint).parent, self.device, resume_from=payload)
            return [path]

        return self._run_stage("train", work)[0]

    def find_checkpoints(self) -> List[Path]:
        checkpoints = sorted(self.output_dir.glob(f"run_*/{CHECKPOINT_NAME}"))
        if not checkpoints:
            raise DataError(f"No checkpoints found under {self.output_dir}")
        return checkpoints

    def evaluate(self, checkpoints: Optional[Sequence[Path]] = None, split: str = "test") -> List[Path]:
        """Evaluate every checkpoint under every configured regime.

        Args:
            checkpoints: Checkpoints to score; defaults to every run_*/checkpoint.pt
            split: Split holding the anomalous images with ground truth

        Returns:
            List[Path]: EvalReport JSON files
        """

        def work() -> List[Path]:
            samples = self.load_samples()
            eval_samples = split_samples(samples, split)
            if not eval_samples:
                raise DataError(f"No {split} slices in the dataset")
            normal_samples = split_samples(samples, "train")
            written = []
            for checkpoint in checkpoints or self.find_checkpoints():
                model, _ = load_checkpoint(checkpoint, self.device)
                eval_dir = Path(checkpoint).parent / "eval" / self.config.method
                for regime in self.config.regimes:
                    self.guard(eval_dir / f"{regime_slug(regime)}.json")
                reports, maps = score_model(model, self.config, eval_samples, normal_samples)
                for report in reports:
                    path = eval_dir / f"{regime_slug(report.threshold_regime)}.json"
                    path.parent.mkdir(parents=True, exist_ok=True)
                    path.write_text(report.model_dump_json(indent=2), encoding="utf-8")
                    written.append(path)
                self._write_panels(eval_dir / "panels", eval_samples, maps, reports[0])
                snapshot_config(self.config, eval_dir)
            return written

        return self._run_stage("eval", work)

    def _write_panels(self, panel_dir: Path, samples: Sequence[Sample], maps: Sequence[AnomalyMap], report: EvalReport) -> None:
        for i, (sample, anomaly_map) in enumerate(list(zip(samples, maps))[: self.config.n_panels]):
            mask = threshold_fixed(anomaly_map, report.threshold)
            stem = panel_dir / f"{i:03d}_{sample.scan_id}_{sample.slice_index:03d}"
            save_saliency(anomaly_map, mask, stem, report.threshold_regime)
            save_panel(
                sample.image,
                anomaly_map.values,
                mask.values,
                sample.anomaly_mask,
                stem.with_name(stem.name + "_panel.png"),
                title=f"{report.method} | {report.threshold_regime} | thr={report.threshold:.3f}",
            )

    def report(self, reports_dir: Optional[Path] = None) -> Path:
        """Average repeated runs and render the results table."""

        def work() -> List[Path]:
            root = Path(reports_dir or self.output_dir)
            self.guard(self.output_dir / "report.csv")
            return [write_report(root, self.output_dir)]

        return self._run_stage("report", work)[0]

