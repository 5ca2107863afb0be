"""Desk-scale laboratory for training classifiers under label noise."""

__version__ = "0.1.0"
