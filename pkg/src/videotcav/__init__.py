"""Concept activation vectors, sign-count TCAV and Grad-CAM for video classifiers."""

__version__ = "0.1.0"
