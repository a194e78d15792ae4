"""Spatial audio + language embedding pipeline (desk scale)."""

__version__ = "0.1.0"
