"""
Results Report - collects EvalReport files, averages repeated runs and renders
the comparison table.
"""

import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple, Union

import pandas as pd
from pydantic import ValidationError

from localization.errors import DataError
from localization.metrics import EvalReport, mean_reports

logger = logging.getLogger(__name__)

TABLE_COLUMNS = ["method", "regime", "uses_anomalous_images", "runs", "AUROC", "AUPRC", "DICE", "IoU", "DICE/scan"]


def collect_reports(root: Union[str, Path]) -> List[EvalReport]:
    """Every EvalReport JSON under root (run_*/eval/<method>/<regime>.json)."""
    reports = []
    for path in sorted(Path(root).glob("run_*/eval/*/*.json")):
        if path.name == "config.json":
            continue
        try:
            reports.append(EvalReport.model_validate_json(path.read_text(encoding="utf-8")))
        except ValidationError as e:
            raise DataError(f"{path} is not a valid EvalReport: {e.error_count()} error(s)") from e
    if not reports:
        raise DataError(f"No evaluation reports found under {root}")
    return reports


def group_reports(reports: List[EvalReport]) -> Dict[Tuple[str, str], List[EvalReport]]:
    groups: Dict[Tuple[str, str], List[EvalReport]] = {}
    for report in reports:
        groups.setdefault((report.method, report.threshold_regime), []).append(report)
    return groups


def summarize(reports: List[EvalReport]) -> pd.DataFrame:
    """One row per (method, regime), metrics averaged over repetitions."""
    rows = []
    for (method, regime), group in sorted(group_reports(reports).items()):
        mean = mean_reports(group)
        rows.append({
            "method": method,
            "regime": regime,
            "uses_anomalous_images": mean.uses_anomalous_images,
            "runs": len(group),
            "AUROC": mean.auroc,
            "AUPRC": mean.auprc,
            "DICE": mean.dice_dataset,
            "IoU": mean.iou_dataset,
            "DICE/scan": f"{mean.dice_per_scan_mean:.3f} ± {mean.dice_per_scan_std:.3f}",
        })
    return pd.DataFrame(rows, columns=TABLE_COLUMNS)


def write_report(root: Union[str, Path], out_dir: Union[str, Path]) -> Path:
    """report.csv, report.txt and report.json (averaged reports) under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = collect_reports(root)
    table = summarize(reports)
    csv_path = out_dir / "report.csv"
    table.to_csv(csv_path, index=False, float_format="%.4f")
    (out_dir / "report.txt").write_text(table.to_string(index=False, float_format=lambda v: f"{v:.3f}") + "\n", encoding="utf-8")
    averaged = [mean_reports(group).model_dump() for _, group in sorted(group_reports(reports).items())]
    (out_dir / "report.json").write_text(json.dumps(averaged, indent=2), encoding="utf-8")
    logger.info(f"📊 Report over {len(reports)} evaluation(s):\n{table.to_string(index=False)}")
    return csv_path
