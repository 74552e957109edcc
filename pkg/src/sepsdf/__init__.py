"""Separable two-object SDF reconstruction from multi-view images and per-object masks."""

__version__ = "0.1.0"
