"""Deterministic SSL engine over frozen feature embeddings."""

__version__ = "0.1.0"
