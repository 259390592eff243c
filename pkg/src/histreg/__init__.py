"""Automatic multimodal registration of histology-like image pairs."""

__version__ = "0.1.0"
