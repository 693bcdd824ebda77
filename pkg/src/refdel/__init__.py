"""Refereed delegation of deterministic ML training programs."""

__version__ = "0.1.0"
