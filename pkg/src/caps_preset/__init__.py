"""CAPS - content-adaptive encoder preset prediction for live bitrate ladders.

This package extracts DCT complexity features from video segments, predicts
x265 encoding time per preset with gradient boosted trees, and picks for
every ladder rung the slowest preset that still meets the live deadline.
"""

__version__ = "0.1.0"

from .main import main

__all__ = ["main", "__version__"]
