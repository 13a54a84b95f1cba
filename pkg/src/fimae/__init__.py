"""Interpolation-masked space-time pretraining and single-point device tracking."""

__version__ = "0.1.0"
