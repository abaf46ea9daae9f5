"""Semisupervised protoform reconstruction with a bidirectional D2P/P2D model."""

__version__ = "0.1.0"
