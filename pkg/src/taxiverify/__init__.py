"""Verification of a vision-based taxi controller with a generative sensor model."""

__version__ = "0.1.0"
