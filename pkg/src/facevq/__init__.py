"""Blind face-video enhancement with spatial-temporal codebooks."""

__version__ = "0.1.0"

from .dataio import VideoTensor

__all__ = ["VideoTensor", "__version__"]
