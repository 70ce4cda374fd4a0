"""Weakly-supervised adversarial domain adaptation for built-up region segmentation."""

__version__ = "0.1.0"
