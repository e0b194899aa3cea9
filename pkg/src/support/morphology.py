"""
Mask morphology - disk erosion and the anatomy (brain) mask of an image.
"""

import numpy as np
from scipy import ndimage

BACKGROUND_LEVEL = 0.01


def disk(radius: int) -> np.ndarray:
    """Disk structuring element {(i, j): i^2 + j^2 <= radius^2}."""
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (yy * yy + xx * xx) <= r * r


def erode_mask(mask: np.ndarray, radius_px: int) -> np.ndarray:
    """Binary erosion by a disk; pixels outside the frame count as background."""
    mask = np.asarray(mask).astype(bool)
    if radius_px < 0:
        raise ValueError(f"erosion radius must be >= 0, got {radius_px}")
    if radius_px == 0:
        return mask.copy()
    return ndimage.binary_erosion(mask, structure=disk(radius_px), border_value=0)


def brain_mask(image: np.ndarray) -> np.ndarray:
    """Non-background pixels (intensity above 0.01)."""
    return np.asarray(image) > BACKGROUND_LEVEL
