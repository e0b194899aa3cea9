"""
Image file I/O - 8/16-bit grayscale PNGs, 1-bit masks, and qualitative panels.
"""

import logging
from pathlib import Path
from typing import Optional, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image  # noqa: E402

from localization.errors import DataError  # noqa: E402

logger = logging.getLogger(__name__)

UINT16_MAX = 65535


def to_uint16(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * UINT16_MAX).astype(np.uint16)


def from_uint16(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32) / np.float32(UINT16_MAX)


def quantize16(values: np.ndarray) -> np.ndarray:
    """Snap intensities to the 16-bit grid so PNG export and reload are exact."""
    return from_uint16(to_uint16(values))


def read_gray(path: Union[str, Path]) -> np.ndarray:
    """Grayscale PNG rescaled to [0, 1] as float32 (8-bit / 255, 16-bit / 65535)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image file not found: {path}")
    try:
        with Image.open(path) as img:
            if img.mode in ("RGB", "RGBA", "P", "LA"):
                img = img.convert("L")
            arr = np.asarray(img)
    except OSError as e:
        raise DataError(f"Cannot read image {path}: {e}") from e
    if arr.dtype == bool:
        return arr.astype(np.float32)
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / np.float32(255)
    if arr.dtype in (np.uint16, np.int32, np.int16):
        return from_uint16(arr.astype(np.uint16))
    raise DataError(f"Unsupported pixel type {arr.dtype} in {path}")


def write_gray16(values: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint16(values)).save(path)
    return path


def write_gray8(values: np.ndarray, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(np.clip(values, 0.0, 1.0) * 255).astype(np.uint8)).save(path)
    return path


def write_mask(mask: np.ndarray, path: Union[str, Path]) -> Path:
    """1-bit PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(mask).astype(bool)).save(path)
    return path


def save_panel(
    image: np.ndarray,
    saliency: np.ndarray,
    mask: np.ndarray,
    ground_truth: Optional[np.ndarray],
    path: Union[str, Path],
    title: str = "",
) -> Path:
    """Input, saliency, thresholded mask and ground truth side by side."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    panels = [("input", image, "gray"), ("saliency", saliency, "jet"), ("mask", mask, "gray")]
    if ground_truth is not None:
        panels.append(("ground truth", ground_truth, "gray"))
    fig, axes = plt.subplots(1, len(panels), figsize=(3 * len(panels), 3))
    for ax, (name, data, cmap) in zip(axes, panels):
        ax.imshow(np.asarray(data, dtype=np.float64), cmap=cmap, vmin=0.0, vmax=1.0)
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    return path
