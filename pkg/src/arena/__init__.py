"""Adaptive-rank low-rank adaptation with l1-gated SVD-form adapters."""

__version__ = "0.1.0"
