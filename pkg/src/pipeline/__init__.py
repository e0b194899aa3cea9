"""
Pipeline package - experiment configuration, stage orchestration, ablation
sweeps and result reports.
"""

from .config import ExperimentConfig, apply_cli_overrides, load_experiment
from .orchestrator import ExperimentOrchestrator

__all__ = ["ExperimentConfig", "ExperimentOrchestrator", "apply_cli_overrides", "load_experiment"]
