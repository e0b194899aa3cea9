"""
Constrained attention anomaly localization.
"""

__version__ = "1.0.0"
