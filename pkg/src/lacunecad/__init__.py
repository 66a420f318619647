"""Two-stage CNN detection pipeline for lacune-like lesions in 3D volumes."""

__version__ = "0.1.0"
