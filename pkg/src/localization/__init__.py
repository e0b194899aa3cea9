"""
Localization package - size-constrained attention for unsupervised anomaly
localization: constraints, the VAE, Grad-CAM, training, inference and metrics.
"""

from .errors import ConfigurationError, DataError, DomainError, NumericError, ShapeError

__all__ = ["ConfigurationError", "DataError", "DomainError", "NumericError", "ShapeError"]
