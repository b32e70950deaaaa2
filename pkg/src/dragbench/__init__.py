"""Desk-scale drag editing over DDIM latents."""

__version__ = "0.1.0"
