"""Attention-MIL subtyping pipeline downstream of patch feature extraction."""

__version__ = "0.1.0"
