"""Temporal collection and distribution decoder for referring video segmentation."""
__version__ = "0.1.0"
