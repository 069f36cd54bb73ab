"""Hierarchical convolutional paragraph generation with twin-network training."""

__version__ = "0.1.0"
