"""Dense registration and seam mosaicking of ridge-pattern images."""

__version__ = "0.1.0"
