"""Exporter exception hierarchy."""


class ExporterError(Exception):
    """Base class for all exporter failures."""


class ModelLoadError(ExporterError):
    """The requested descriptor model does not exist or cannot be set up."""


class ImageLoadError(ExporterError):
    """An input image is missing, unreadable, or not decodable."""


class WriteError(ExporterError):
    """An output file could not be written safely."""
