"""Layered low-rank diffusion for multi-instance erasing, at toy scale."""

__version__ = "0.1.0"
