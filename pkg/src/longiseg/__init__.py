"""Longitudinal GTV segmentation on registered pre-/mid-RT MRI."""

__version__ = "0.1.0"
