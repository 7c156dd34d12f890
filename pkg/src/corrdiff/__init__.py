"""Correspondence-preserving diffusion for ordered 3-D point sets."""

__version__ = "0.1.0"
