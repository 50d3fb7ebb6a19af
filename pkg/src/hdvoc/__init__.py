"""Hierarchical diffusion vocoder toolkit."""

__version__ = "0.1.0"
