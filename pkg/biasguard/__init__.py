"""Mahalanobis-metric VAEGAN engine for generalized zero-shot classification."""

__version__ = "0.1.0"
