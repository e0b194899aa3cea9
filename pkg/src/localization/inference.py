"""
Inference - anomaly saliency maps, the three thresholding regimes, and the
residual-scoring baseline.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch

from .attention import grad_cam, grad_cam_disentangled, inverted_attention, minmax_normalize
from .errors import DomainError, ShapeError
from .model import ConstrainedVAE, reconstruct
from support.imaging import write_gray16, write_mask
from support.morphology import erode_mask

logger = logging.getLogger(__name__)

PROVENANCES = ("attention", "attention_disentangled", "inverted_attention", "residual")
INFERENCE_BATCH = 32


@dataclass
class AnomalyMap:
    """Saliency over the image grid, values in [0, 1]."""
    values: np.ndarray
    provenance: str


@dataclass
class SegMask:
    """Binary segmentation and the threshold that produced it."""
    values: np.ndarray
    threshold: float


def _to_batch(images: Union[torch.Tensor, np.ndarray, Sequence[np.ndarray]]) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images
    elif isinstance(images, (list, tuple)):
        x = torch.from_numpy(np.stack([np.asarray(im, dtype=np.float32) for im in images]))
    else:
        x = torch.from_numpy(np.asarray(images, dtype=np.float32))
    if x.dim() == 2:
        x = x[None, None]
    elif x.dim() == 3:
        x = x[:, None]
    return x.float()


def _map_in_chunks(x: torch.Tensor, fn: Callable[[torch.Tensor], torch.Tensor], provenance: str) -> List[AnomalyMap]:
    maps: List[AnomalyMap] = []
    for start in range(0, x.shape[0], INFERENCE_BATCH):
        values = fn(x[start:start + INFERENCE_BATCH]).detach().cpu().double().numpy()
        maps.extend(AnomalyMap(values=v[0], provenance=provenance) for v in values)
    return maps


def attention_saliency(model: ConstrainedVAE, x, depth: int = 1) -> List[AnomalyMap]:
    """Min-max normalized raw Grad-CAM; high values mark anomaly candidates (never inverted)."""
    model.eval()
    return _map_in_chunks(_to_batch(x), lambda b: minmax_normalize(grad_cam(model, b, depth).raw), "attention")


def disentangled_attention_saliency(model: ConstrainedVAE, x, depth: int = 1) -> List[AnomalyMap]:
    """Grad-CAM_D baseline: per-dimension CAMs averaged, then min-max normalized."""
    model.eval()
    return _map_in_chunks(
        _to_batch(x), lambda b: minmax_normalize(grad_cam_disentangled(model, b, depth).raw), "attention_disentangled"
    )


def inverted_attention_saliency(model: ConstrainedVAE, x, depth: int = 1) -> List[AnomalyMap]:
    """Expansion-loss baseline: 1 - sigmoid CAM, regions the network does not attend to."""
    model.eval()
    return _map_in_chunks(_to_batch(x), lambda b: inverted_attention(grad_cam(model, b, depth)), "inverted_attention")


def residual_map(x: np.ndarray, xhat: np.ndarray, eroded_mask: np.ndarray) -> AnomalyMap:
    """|x - xhat| restricted to the (already eroded) brain mask, min-max normalized."""
    x, xhat = np.asarray(x, dtype=np.float64), np.asarray(xhat, dtype=np.float64)
    if x.shape != xhat.shape or eroded_mask.shape != x.shape:
        raise ShapeError(f"image {x.shape}, reconstruction {xhat.shape} and mask {eroded_mask.shape} must match")
    residual = np.abs(x - xhat) * eroded_mask.astype(np.float64)
    normalized = minmax_normalize(torch.from_numpy(residual)).numpy()
    return AnomalyMap(values=normalized, provenance="residual")


def residual_saliency(
    model: ConstrainedVAE,
    x,
    brain_masks: Sequence[np.ndarray],
    erosion_radius: int = 1,
) -> List[AnomalyMap]:
    """Residual baseline from the posterior-mean reconstruction."""
    model.eval()
    batch = _to_batch(x)
    if len(brain_masks) != batch.shape[0]:
        raise ShapeError(f"{len(brain_masks)} brain masks for {batch.shape[0]} images")
    maps: List[AnomalyMap] = []
    with torch.no_grad():
        for start in range(0, batch.shape[0], INFERENCE_BATCH):
            chunk = batch[start:start + INFERENCE_BATCH]
            xhat = reconstruct(model, chunk).cpu().numpy()
            for i in range(chunk.shape[0]):
                mask = np.asarray(brain_masks[start + i])
                if mask.shape != tuple(chunk.shape[-2:]):
                    raise ShapeError(f"brain mask shape {mask.shape} does not match image {tuple(chunk.shape[-2:])}")
                maps.append(residual_map(chunk[i, 0].numpy(), xhat[i, 0], erode_mask(mask, erosion_radius)))
    return maps


def threshold_fixed(anomaly_map: AnomalyMap, tau: float) -> SegMask:
    if not 0.0 <= tau <= 1.0:
        raise DomainError(f"threshold must lie in [0, 1], got {tau}")
    return SegMask(values=anomaly_map.values >= tau, threshold=float(tau))


def pooled_sweep(scores: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Distinct thresholds (descending) with true/false positive counts of `scores >= threshold`.

    Equal scores form one threshold group.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    hits = np.cumsum(labels[order])
    # Last index of every run of equal scores.
    ends = np.r_[np.flatnonzero(np.diff(sorted_scores) != 0), sorted_scores.size - 1]
    tp = hits[ends]
    fp = (ends + 1) - tp
    return sorted_scores[ends], tp, fp


def _pool(maps: Sequence[AnomalyMap], gts: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    if len(maps) == 0 or len(maps) != len(gts):
        raise DomainError(f"need paired, non-empty maps and masks, got {len(maps)} maps and {len(gts)} masks")
    for m, g in zip(maps, gts):
        if m.values.shape != np.asarray(g).shape:
            raise ShapeError(f"map shape {m.values.shape} does not match mask shape {np.asarray(g).shape}")
    scores = np.concatenate([m.values.ravel() for m in maps])
    labels = np.concatenate([np.asarray(g).ravel() for g in gts]).astype(bool)
    return scores, labels


def operating_point(scores: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """Threshold maximizing pooled DICE (F1) and that DICE; ties go to the smallest threshold."""
    labels = np.asarray(labels).ravel().astype(bool)
    positives = int(labels.sum())
    if positives == 0 or positives == labels.size:
        raise DomainError("operating point needs both anomalous and normal pixels in the pooled labels")
    thresholds, tp, fp = pooled_sweep(scores, labels)
    dice = 2.0 * tp / (tp + fp + positives)
    best = np.flatnonzero(dice == dice.max())[-1]
    return float(thresholds[best]), float(dice[best])


def threshold_operating_point(maps: Sequence[AnomalyMap], gts: Sequence[np.ndarray]) -> float:
    """OP threshold over pooled pixels. Requires anomalous images with ground truth."""
    scores, labels = _pool(maps, gts)
    threshold, dice = operating_point(scores, labels)
    logger.info(f"🎯 Operating point threshold={threshold:.4f} (pooled DICE={dice:.4f})")
    return threshold


def threshold_percentile(normal_maps: Sequence[AnomalyMap], q: float) -> float:
    """Average per-image q-th percentile (nearest-rank) of saliency on normal images."""
    if len(normal_maps) == 0:
        raise DomainError("percentile threshold needs at least one normal map")
    if not 0.0 < q < 100.0:
        raise DomainError(f"percentile must lie in (0, 100), got {q}")
    per_image = [np.percentile(m.values.ravel(), q, method="inverted_cdf") for m in normal_maps]
    return float(np.mean(per_image))


def save_saliency(
    anomaly_map: AnomalyMap,
    mask: Optional[SegMask],
    stem: Union[str, Path],
    regime: str,
) -> Path:
    """16-bit saliency PNG, 1-bit mask PNG and a JSON sidecar with the threshold provenance."""
    stem = Path(stem)
    write_gray16(anomaly_map.values, stem.with_name(stem.name + "_saliency.png"))
    sidecar = {"provenance": anomaly_map.provenance, "regime": regime, "threshold": None}
    if mask is not None:
        write_mask(mask.values, stem.with_name(stem.name + "_mask.png"))
        sidecar["threshold"] = mask.threshold
    sidecar_path = stem.with_name(stem.name + ".json")
    sidecar_path.write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    return sidecar_path
