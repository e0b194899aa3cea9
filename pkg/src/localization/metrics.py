"""
Evaluation protocol - pixel-pooled AUROC/AUPRC, dataset-level DICE and IoU,
per-scan DICE, and the EvalReport document.
"""

import logging
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict
from sklearn.metrics import average_precision_score, roc_auc_score

from .errors import ConfigurationError, DataError, DomainError, ShapeError
from .inference import (
    AnomalyMap,
    SegMask,
    attention_saliency,
    disentangled_attention_saliency,
    inverted_attention_saliency,
    residual_saliency,
    threshold_fixed,
    threshold_operating_point,
    threshold_percentile,
)

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
METHODS = ("attention", "attention_disentangled", "inverted_attention", "residual")


class EvalReport(BaseModel):
    """Metrics for one model, one scoring method and one threshold regime."""

    model_config = ConfigDict(extra="forbid")

    schema_version: int = REPORT_SCHEMA_VERSION
    method: str
    threshold_regime: str
    threshold: float
    uses_anomalous_images: bool
    auroc: float
    auprc: float
    dice_dataset: float
    iou_dataset: float
    dice_per_scan_mean: float
    dice_per_scan_std: float
    n_images: int
    n_pixels: int


def _check_labels(scores, labels) -> Tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores for {labels.size} labels")
    return scores, labels


def auroc(scores, labels) -> float:
    """Probability a random positive outscores a random negative (ties count 1/2)."""
    scores, labels = _check_labels(scores, labels)
    if labels.all() or not labels.any():
        raise DomainError("AUROC needs both positive and negative pixels")
    return float(roc_auc_score(labels, scores))


def auprc(scores, labels) -> float:
    """Average precision: step-wise area under the precision-recall curve."""
    scores, labels = _check_labels(scores, labels)
    if not labels.any():
        raise DomainError("AUPRC needs at least one positive pixel")
    return float(average_precision_score(labels, scores))


def _overlap_counts(masks: Sequence, gts: Sequence) -> Tuple[int, int, int]:
    if len(masks) != len(gts):
        raise ShapeError(f"{len(masks)} masks for {len(gts)} ground truths")
    inter = pred = truth = 0
    for m, g in zip(masks, gts):
        m = np.asarray(m.values if isinstance(m, SegMask) else m).astype(bool)
        g = np.asarray(g).astype(bool)
        if m.shape != g.shape:
            raise ShapeError(f"mask shape {m.shape} does not match ground truth {g.shape}")
        inter += int(np.logical_and(m, g).sum())
        pred += int(m.sum())
        truth += int(g.sum())
    return inter, pred, truth


def _dice_iou(inter: int, pred: int, truth: int) -> Tuple[float, float]:
    union = pred + truth - inter
    if union == 0:
        # Both empty: prediction and truth agree there is nothing.
        return 1.0, 1.0
    iou = inter / union
    return 2.0 * iou / (1.0 + iou), iou


def dice_iou_dataset(masks: Sequence, gts: Sequence) -> Tuple[float, float]:
    """DICE and IoU over pixels pooled across all images."""
    return _dice_iou(*_overlap_counts(masks, gts))


def dice_per_scan(masks: Sequence, gts: Sequence, scan_ids: Sequence[str]) -> Tuple[float, float]:
    """Mean and population std of DICE computed per scan (pixels pooled within a scan)."""
    if len(scan_ids) != len(masks):
        raise DataError(f"{len(scan_ids)} scan ids for {len(masks)} masks")
    groups: Dict[str, List[int]] = {}
    for i, scan in enumerate(scan_ids):
        if not scan:
            raise DataError(f"image {i} has no scan id")
        groups.setdefault(scan, []).append(i)
    scores = [
        _dice_iou(*_overlap_counts([masks[i] for i in idx], [gts[i] for i in idx]))[0]
        for _, idx in sorted(groups.items())
    ]
    if not scores:
        raise DataError("no scans to evaluate")
    return float(np.mean(scores)), float(np.std(scores))


def parse_regime(regime: str) -> Tuple[str, Optional[float]]:
    """'fixed:0.5' -> ('fixed', 0.5); 'op' -> ('op', None); 'percentile:95' -> ('percentile', 95.0)."""
    kind, _, value = regime.partition(":")
    if kind == "op" and not value:
        return "op", None
    if kind in ("fixed", "percentile") and value:
        try:
            return kind, float(value)
        except ValueError:
            pass
    raise ConfigurationError(f"Unknown threshold regime: {regime!r} (expected fixed:<tau>, op, percentile:<q>)")


def evaluate_maps(
    maps: Sequence[AnomalyMap],
    gts: Sequence[np.ndarray],
    scan_ids: Sequence[str],
    regime: str,
    normal_maps: Optional[Sequence[AnomalyMap]] = None,
    method: str = "attention",
) -> EvalReport:
    """Score precomputed saliency maps under one threshold regime."""
    if any(g is None for g in gts):
        if parse_regime(regime)[0] == "op":
            raise DomainError(
                "the operating-point regime needs ground-truth masks of anomalous images; "
                "it is not available in the unsupervised setting"
            )
        raise DomainError("evaluation needs a ground-truth mask for every image")
    kind, value = parse_regime(regime)
    if kind == "fixed":
        threshold = value
    elif kind == "op":
        threshold = threshold_operating_point(maps, gts)
    else:
        if not normal_maps:
            raise DomainError("percentile regime needs saliency maps of normal images")
        threshold = threshold_percentile(normal_maps, value)
    threshold = float(threshold)

    scores = np.concatenate([m.values.ravel() for m in maps])
    labels = np.concatenate([np.asarray(g).ravel() for g in gts]).astype(bool)
    masks = [threshold_fixed(m, threshold) for m in maps]
    dice, iou = dice_iou_dataset(masks, gts)
    scan_mean, scan_std = dice_per_scan(masks, gts, scan_ids)
    report = EvalReport(
        method=method,
        threshold_regime=regime if kind != "op" else "op",
        threshold=threshold,
        uses_anomalous_images=(kind == "op"),
        auroc=auroc(scores, labels),
        auprc=auprc(scores, labels),
        dice_dataset=dice,
        iou_dataset=iou,
        dice_per_scan_mean=scan_mean,
        dice_per_scan_std=scan_std,
        n_images=len(maps),
        n_pixels=int(scores.size),
    )
    logger.info(
        f"📊 [{method} | {report.threshold_regime}] AUROC={report.auroc:.3f} AUPRC={report.auprc:.3f} "
        f"DICE={report.dice_dataset:.3f} IoU={report.iou_dataset:.3f} "
        f"DICE/scan={report.dice_per_scan_mean:.3f}±{report.dice_per_scan_std:.3f} (thr={threshold:.4f})"
    )
    return report


def saliency_maps(model, samples: Sequence[Any], method: str = "attention", depth: int = 1, erosion_radius: int = 1) -> List[AnomalyMap]:
    """Saliency for samples exposing .image and .brain_mask, by scoring method."""
    images = [s.image for s in samples]
    if not images:
        return []
    if method == "attention":
        return attention_saliency(model, images, depth)
    if method == "attention_disentangled":
        return disentangled_attention_saliency(model, images, depth)
    if method == "inverted_attention":
        return inverted_attention_saliency(model, images, depth)
    if method == "residual":
        return residual_saliency(model, images, [s.brain_mask for s in samples], erosion_radius)
    raise ConfigurationError(f"Unknown scoring method: {method!r}")


def evaluate(
    model,
    samples: Sequence[Any],
    regime: str,
    method: str = "attention",
    depth: int = 1,
    normal_samples: Optional[Sequence[Any]] = None,
    erosion_radius: int = 1,
) -> EvalReport:
    """Full report for a model on samples carrying ground-truth masks."""
    maps = saliency_maps(model, samples, method, depth, erosion_radius)
    normal_maps = None
    if parse_regime(regime)[0] == "percentile":
        normal_maps = saliency_maps(model, normal_samples or [], method, depth, erosion_radius)
    return evaluate_maps(
        maps,
        [s.anomaly_mask for s in samples],
        [s.scan_id for s in samples],
        regime,
        normal_maps=normal_maps,
        method=method,
    )


def mean_reports(reports: Sequence[EvalReport]) -> EvalReport:
    """Arithmetic mean of repeated runs' reports (same method, regime and data)."""
    if not reports:
        raise DomainError("no reports to average")
    first = reports[0]
    for r in reports[1:]:
        if (r.method, r.threshold_regime, r.n_images, r.n_pixels) != (
            first.method, first.threshold_regime, first.n_images, first.n_pixels
        ):
            raise ConfigurationError("can only average reports of the same method, regime and dataset")
    averaged = first.model_dump()
    for name in ("threshold", "auroc", "auprc", "dice_dataset", "iou_dataset", "dice_per_scan_mean", "dice_per_scan_std"):
        averaged[name] = float(np.mean([getattr(r, name) for r in reports]))
    return EvalReport(**averaged)


def report_schema() -> Dict[str, Any]:
    """Published JSON schema of EvalReport documents."""
    return EvalReport.model_json_schema()
