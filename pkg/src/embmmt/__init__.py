"""Multimodal translation with embedding-prediction decoding."""

__version__ = "0.1.0"
