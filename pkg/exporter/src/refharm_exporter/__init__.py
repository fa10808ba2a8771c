"""Offline per-patch feature exporter producing RAIF grids."""

from .errors import ExporterError, ImageLoadError, ModelLoadError, WriteError
from .export import ExportJob, ExportResult, export_features, load_rgb
from .models import MODELS, load_model

__all__ = [
    "ExporterError",
    "ExportJob",
    "ExportResult",
    "ImageLoadError",
    "MODELS",
    "ModelLoadError",
    "WriteError",
    "export_features",
    "load_model",
    "load_rgb",
]
