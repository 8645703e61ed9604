"""Conditional diffusion super-resolution of spatial transcriptomics maps."""

__version__ = "0.1.0"
