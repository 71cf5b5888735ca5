"""Weakly-supervised diagnosis identification from discharge letters."""

__version__ = "1.0.0"
