"""Sparse vision-language interaction for decoder transformers at desk scale."""

__version__ = "0.1.0"
