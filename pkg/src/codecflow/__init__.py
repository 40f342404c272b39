"""Codec-latent speech bandwidth extension with conditional flow matching."""

__version__ = "0.1.0"
