"""Shelf-choice and item-count prediction from gaze scan-paths."""

__version__ = "0.1.0"
