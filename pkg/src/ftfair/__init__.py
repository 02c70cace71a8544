"""Finish-time fair GPU cluster scheduling."""

__version__ = "0.1.0"
