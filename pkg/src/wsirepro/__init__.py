"""Reproducible whole-slide image classification pipeline over DICOM slide microscopy."""

__version__ = "0.1.0"

from .errors import WsiReproError  # noqa: E402

__all__ = ["WsiReproError", "__version__"]
