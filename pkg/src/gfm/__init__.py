"""Desk-scale geospatial foundation-model pipeline in NumPy."""

__version__ = "0.1.0"
