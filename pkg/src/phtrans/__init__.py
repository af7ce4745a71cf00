"""Parallel hybrid 3D Swin/CNN segmentation network built on a minimal
autodiff tensor engine."""

from .engine import Tensor, Tape

__all__ = ["Tensor", "Tape"]
__version__ = "0.1.0"
