"""Tabular toolkit for forward and backward general value functions."""

__version__ = "0.1.0"
