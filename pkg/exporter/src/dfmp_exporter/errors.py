class ExporterError(Exception):
    """Base class for exporter failures."""


class ModelLoadError(ExporterError):
    """Model file missing, malformed, or of an unsupported version."""


class ShapeMismatchError(ExporterError):
    """Declared stride/dim disagree with the model's actual output grids."""
