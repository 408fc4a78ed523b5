"""Deformable Gaussian-splatting reconstruction of synthetic driving scenes,
with novel-trajectory supervision and novel-view evaluation."""

__version__ = "0.1.0"
