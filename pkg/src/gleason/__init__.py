"""
gleason - tile-level Gleason grading of prostate whole-slide images.

This package tiles annotated slides into a labeled dataset, classifies slide
tiles through a pluggable backend, renders heatmap overlays and evaluates
predictions against pathologist annotations.
"""

__version__ = "0.1.0"

from .annotation import GleasonClass
from .config import PipelineConfig
from .core import DatasetPreparer, OverlayRenderer, PredictionEvaluator, SlidePredictor
from .errors import GleasonError
from .wsi import open_slide, tile_grid

__all__ = [
    "DatasetPreparer",
    "GleasonClass",
    "GleasonError",
    "OverlayRenderer",
    "PipelineConfig",
    "PredictionEvaluator",
    "SlidePredictor",
    "open_slide",
    "tile_grid",
]
