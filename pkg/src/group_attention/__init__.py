"""Attention pooling of face sets for group-level emotion recognition."""

__version__ = "0.1.0"
