"""Diffusion-model CSI enhancement for a multi-user MIMO semantic link."""

__version__ = "0.1.0"
