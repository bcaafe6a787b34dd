"""Scanpath generation wired into a gaze-augmented text classifier."""

__version__ = "0.1.0"
