"""Ensemble directional Kalman filter for joint position and attitude tracking."""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
