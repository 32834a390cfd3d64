"""Conditional diffusion synthesis of radar range-azimuth maps."""

__version__ = "0.1.0"
