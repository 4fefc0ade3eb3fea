"""Desk-scale IoU-enhanced self attention and dynamic channel weighting for a sparse-query detector."""

__version__ = "0.1.0"
