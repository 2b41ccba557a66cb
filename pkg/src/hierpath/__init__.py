"""Coarse-to-fine hierarchical classification of histopathology patches."""

__version__ = "0.1.0"
