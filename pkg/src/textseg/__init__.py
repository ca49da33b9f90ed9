"""Supervised text segmentation with a hierarchical BiLSTM, built on numpy."""

__version__ = "0.1.0"
