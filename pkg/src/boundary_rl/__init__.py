"""Boundary-RL: weakly-supervised segmentation by walking patches to object boundaries."""

__version__ = "0.1.0"
