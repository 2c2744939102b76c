"""Geometry-aware spatio-temporal corner detection toolkit."""

__version__ = "0.1.0"
