"""Inexact variable-metric randomized block-coordinate descent."""

__version__ = "0.1.0"
