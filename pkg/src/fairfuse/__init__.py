"""Fuse frozen classifiers into a predictor that is fairer across several sensitive attributes."""

__version__ = "0.1.0"
