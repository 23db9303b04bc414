"""Embedding-matching perturbations against a tiny vision transformer."""

__version__ = "0.1.0"
