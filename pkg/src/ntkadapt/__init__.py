"""Adaptive NTK loss-weight training for physics-informed residual models,
with randomized sketch-based NTK estimation."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
