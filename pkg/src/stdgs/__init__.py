"""Spatiotemporal-disentangled Gaussian splatting for frame + event data."""

__version__ = "0.1.0"
