"""Calibration-free LiDAR-camera proposal fusion by learned box matching."""

__version__ = "0.1.0"
