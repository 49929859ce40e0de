"""Sketch-to-photo face synthesis by generator inversion."""

__version__ = "0.1.0"
