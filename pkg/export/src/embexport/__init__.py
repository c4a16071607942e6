"""Frozen-embedding exporter writing the engine's EMB1 interchange format."""

__version__ = "0.1.0"
