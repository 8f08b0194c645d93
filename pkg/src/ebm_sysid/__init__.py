"""Stable-by-design system identification with hybrid energy-based models."""

__version__ = "0.1.0"
