"""Hybrid camera-model-based / camera-model-free lifting of monocular images
to bird's-eye-view semantic occupancy."""

__version__ = "0.1.0"
