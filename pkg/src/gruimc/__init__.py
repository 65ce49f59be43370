"""Stable deep-GRU models and controllers for internal model control."""

__version__ = "0.1.0"
