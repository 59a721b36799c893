"""Cascade multi-view stereo with epipolar-attention view fusion and OT depth readout."""

__version__ = "0.1.0"

from .cascade import PipelineConfig, PipelineResult, run_pipeline
from .errors import ConfigurationError, FormatError, UsageError, WeightShapeError
from .geometry import CameraModel

__all__ = [
    "CameraModel",
    "ConfigurationError",
    "FormatError",
    "PipelineConfig",
    "PipelineResult",
    "UsageError",
    "WeightShapeError",
    "run_pipeline",
    "__version__",
]
