"""
Support package - slice datasets, the synthetic benchmark, mask morphology
and image file I/O.
"""

from .morphology import brain_mask, erode_mask
from .slice_dataset import Sample, export_dataset, filter_small_anomalies, load_dataset
from .synthetic_data import SynthConfig, generate_synthetic

__all__ = [
    'Sample',
    'SynthConfig',
    'brain_mask',
    'erode_mask',
    'export_dataset',
    'filter_small_anomalies',
    'generate_synthetic',
    'load_dataset',
]
