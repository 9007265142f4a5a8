"""fpi-locate: find a UAV image inside a satellite map by direct point prediction."""

__version__ = "0.1.0"
