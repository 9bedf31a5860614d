"""Diffusion features with content-shift suppression and regularized amalgamation."""

__version__ = "0.1.0"
