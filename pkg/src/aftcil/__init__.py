"""Exemplar-free class-incremental sound classification with acoustic feature transformation."""

__version__ = "0.1.0"
