"""Robustness and information-geometry tooling for small image classifiers."""

__version__ = "0.1.0"
