"""Flow-propagated video semantic segmentation with distortion-aware correction."""

__version__ = "0.1.0"
