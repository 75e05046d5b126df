"""Spatio-temporal occlusion detection for angiographic image sequences."""

__version__ = "0.1.0"
