"""
Error vocabulary shared by the localization, support and pipeline packages.
"""

from typing import Any, Optional


class DomainError(ValueError):
    """A value lies outside the domain of an operation."""


class ShapeError(ValueError):
    """Tensor or array shapes do not match what an operation expects."""


class ConfigurationError(ValueError):
    """A configuration value is invalid or infeasible."""


class DataError(ValueError):
    """A dataset file or manifest entry cannot be used."""


class NumericError(FloatingPointError):
    """A loss or gradient became non-finite.

    Carries the optimizer step at which it happened and, when training, the
    last checkpoint payload whose parameters were still finite.
    """

    def __init__(self, message: str, step: Optional[int] = None, checkpoint: Optional[Any] = None):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint
