"""Two-stream video scene recognition over precomputed features."""

__version__ = "0.1.0"
