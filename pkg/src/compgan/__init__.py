"""Compositional GAN generators with relational and background structure."""

__version__ = "0.1.0"
