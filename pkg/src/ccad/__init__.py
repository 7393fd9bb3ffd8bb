"""Anomaly detection by diffusion reconstruction conditioned on a compressed bank of global features."""

__version__ = "0.1.0"
