"""Ladder networks for semi-supervised classification, in numpy."""

__version__ = "0.1.0"
