"""Dense piecewise-planar two-frame reconstruction of dynamic scenes."""

__version__ = "0.1.0"
