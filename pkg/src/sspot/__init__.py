"""Semi-supervised spatiotemporal bounding-box detection for gridded climate fields."""

__version__ = "0.1.0"
