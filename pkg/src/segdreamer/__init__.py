"""Segmentation-masked world models for pixel control under visual distraction."""

from segdreamer.errors import (
    CheckpointError,
    ConfigError,
    InputError,
    NumericalError,
    ReportError,
    ShapeError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "InputError",
    "NumericalError",
    "ReportError",
    "ShapeError",
    "UsageError",
]
