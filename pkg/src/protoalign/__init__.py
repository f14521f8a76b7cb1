"""Prototypical-parts classifiers, a spatial-misalignment benchmark, and alignment-aware training."""

__version__ = "0.1.0"
