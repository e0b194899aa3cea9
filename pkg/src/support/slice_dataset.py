"""
Slice Dataset - 2D slices with optional anomaly masks, the versioned JSON
manifest they are stored under, and the split/filter policy.
"""

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from localization.errors import DataError
from .imaging import read_gray, write_gray16, write_gray8
from .morphology import brain_mask

# Configure logger for this module
logger = logging.getLogger(__name__)
logger.setLevel(logging.INFO)

MANIFEST_FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
Split = Literal["train", "val", "test"]


@dataclass
class Sample:
    """One slice. Training slices never carry anomaly pixels."""
    image: np.ndarray
    anomaly_mask: Optional[np.ndarray]
    scan_id: str
    split: str
    slice_index: int = 0

    @property
    def brain_mask(self) -> np.ndarray:
        return brain_mask(self.image)

    @property
    def anomaly_fraction(self) -> float:
        if self.anomaly_mask is None:
            return 0.0
        return float(np.count_nonzero(self.anomaly_mask)) / self.anomaly_mask.size

    def equals(self, other: "Sample") -> bool:
        """Field-wise equality with exact pixel comparison."""
        if (self.scan_id, self.split, self.slice_index) != (other.scan_id, other.split, other.slice_index):
            return False
        if not np.array_equal(self.image, other.image):
            return False
        if self.anomaly_mask is None or other.anomaly_mask is None:
            return self.anomaly_mask is None and other.anomaly_mask is None
        return np.array_equal(self.anomaly_mask, other.anomaly_mask)


class ManifestEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_path: str
    mask_path: Optional[str] = None
    scan_id: str = Field(min_length=1)
    split: Split
    slice_index: int = Field(0, ge=0)


class Manifest(BaseModel):
    """Versioned list of slices; paths are relative to the manifest's directory."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = MANIFEST_FORMAT_VERSION
    samples: List[ManifestEntry]


def split_samples(samples: Iterable[Sample], split: str) -> List[Sample]:
    return [s for s in samples if s.split == split]


def stack_images(samples: Sequence[Sample]) -> np.ndarray:
    """Images as a float32 batch shaped (N, 1, H, W)."""
    if not samples:
        return np.zeros((0, 1, 0, 0), dtype=np.float32)
    return np.stack([s.image for s in samples]).astype(np.float32)[:, None]


def check_split_disjointness(samples: Iterable[Sample]) -> None:
    owner: Dict[str, str] = {}
    for s in samples:
        if owner.setdefault(s.scan_id, s.split) != s.split:
            raise DataError(f"scan {s.scan_id!r} appears in both {owner[s.scan_id]!r} and {s.split!r}")


def filter_small_anomalies(samples: Sequence[Sample], min_fraction: float = 1e-4) -> List[Sample]:
    """Drop val/test slices whose anomaly-pixel fraction is below min_fraction.

    A fraction equal to min_fraction is kept. Train slices and slices without
    a mask (unlabeled) pass through.
    """
    kept = [
        s for s in samples
        if s.split == "train" or s.anomaly_mask is None or s.anomaly_fraction >= min_fraction
    ]
    dropped = len(samples) - len(kept)
    if dropped:
        logger.info(f"🧹 Filtered {dropped} slice(s) with anomaly fraction < {min_fraction:g}")
    return kept


def _resolve(base: Path, relative: str) -> Path:
    path = Path(relative)
    return path if path.is_absolute() else base / path


def _parse_manifest(manifest_path: Path) -> Manifest:
    if not manifest_path.exists():
        raise DataError(f"Manifest not found: {manifest_path}")
    try:
        document = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"Manifest {manifest_path} is not valid JSON: {e}") from e
    try:
        manifest = Manifest.model_validate(document)
    except ValidationError as e:
        problems = "; ".join(f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors())
        raise DataError(f"Manifest {manifest_path} is invalid: {problems}") from e
    if manifest.format_version != MANIFEST_FORMAT_VERSION:
        raise DataError(f"Unsupported manifest format_version={manifest.format_version} in {manifest_path}")
    if not manifest.samples:
        raise DataError(f"Manifest {manifest_path} lists no samples")
    return manifest


def load_dataset(manifest_path: Union[str, Path]) -> List[Sample]:
    """Read every slice listed by a manifest; images in [0, 1], masks binarized at 0.5."""
    start_time = time.time()
    manifest_path = Path(manifest_path)
    manifest = _parse_manifest(manifest_path)
    base = manifest_path.parent
    samples: List[Sample] = []
    for entry in manifest.samples:
        image_path = _resolve(base, entry.image_path)
        image = read_gray(image_path)
        if image.ndim != 2:
            raise DataError(f"Expected a 2D grayscale slice in {image_path}, got shape {image.shape}")
        mask = None
        if entry.mask_path is not None:
            mask_path = _resolve(base, entry.mask_path)
            mask = read_gray(mask_path) > 0.5
            if mask.shape != image.shape:
                raise DataError(f"Mask {mask_path} has shape {mask.shape}, image {image_path} has {image.shape}")
            if entry.split == "train" and mask.any():
                raise DataError(f"Training slice {image_path} has anomaly pixels in {mask_path}")
        samples.append(Sample(image, mask, entry.scan_id, entry.split, entry.slice_index))
    check_split_disjointness(samples)
    logger.info(f"📁 Loaded {len(samples)} slices from {manifest_path} in {time.time() - start_time:.2f}s")
    return samples


def export_dataset(samples: Sequence[Sample], out_dir: Union[str, Path]) -> Path:
    """Write 16-bit image PNGs, 8-bit mask PNGs and manifest.json under out_dir."""
    out_dir = Path(out_dir)
    entries: List[ManifestEntry] = []
    for i, s in enumerate(samples):
        stem = f"{s.split}/{s.scan_id}_{s.slice_index:03d}_{i:05d}"
        image_rel = f"images/{stem}.png"
        write_gray16(s.image, out_dir / image_rel)
        mask_rel = None
        if s.anomaly_mask is not None:
            mask_rel = f"masks/{stem}.png"
            write_gray8(s.anomaly_mask.astype(np.float32), out_dir / mask_rel)
        entries.append(ManifestEntry(
            image_path=image_rel, mask_path=mask_rel, scan_id=s.scan_id, split=s.split, slice_index=s.slice_index
        ))
    manifest_path = out_dir / "manifest.json"
    manifest = Manifest(samples=entries)
    manifest_path.write_text(json.dumps(manifest.model_dump(mode="json"), indent=2), encoding="utf-8")
    logger.info(f"📁 Wrote {len(entries)} slices and manifest {manifest_path}")
    return manifest_path
