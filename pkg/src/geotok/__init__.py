"""Spectral mesh tokenization and patch transformers on triangle meshes."""

__version__ = "0.1.0"
