"""Unified artifact detection and correction on a synthetic latent-grid domain."""

__version__ = "0.1.0"
