"""Toy-scale text-based video segmentation with appearance, motion and language streams.

Everything runs on a small numpy reverse-mode autodiff engine
(:mod:`tvseg.autodiff`); synthetic moving-shape clips stand in for real
video datasets.
"""
from .config import LADDER, PRESETS, AblationConfig, RunConfig, get_preset
from .errors import ConfigError, DimensionError, NumericalError, SpecError, UsageError, VocabularyError
from .metrics import MetricsReport, iou, map_50_95, mean_iou, overall_iou, precision_at
from .model import SegModel

__version__ = "0.1.0"

__all__ = [
    "LADDER", "PRESETS", "AblationConfig", "RunConfig", "get_preset", "SegModel", "MetricsReport",
    "iou", "map_50_95", "mean_iou", "overall_iou", "precision_at",
    "ConfigError", "DimensionError", "NumericalError", "SpecError", "UsageError", "VocabularyError",
]
