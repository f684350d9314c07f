"""Grasp planning from primitive shape fits on segmented depth images."""

__version__ = "0.1.0"
