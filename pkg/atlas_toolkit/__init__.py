"""Groupwise generative tissue atlas toolkit."""

__version__ = "0.1.0"
