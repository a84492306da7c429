"""Complexity-routed, granularity-adaptive windowed vision transformer."""

__version__ = "0.1.0"
