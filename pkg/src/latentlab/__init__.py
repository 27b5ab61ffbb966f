"""Desk-scale laboratory for latent image synthesis with transformer objectives."""

__version__ = "0.1.0"
