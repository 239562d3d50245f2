"""Export dense detector/descriptor maps from a model to "DFMP" files.

The exporter runs dense inference and serializes the raw grids; it never
post-processes logits or normalizes descriptors.  All downstream semantics
(heatmaps, keypoints, matching) belong to the consuming pipeline.
"""

from .errors import ExporterError, ModelLoadError, ShapeMismatchError
from .export import ExporterConfig, export_feature_map, write_dfmp
from .model import ToyDenseModel, load_model, make_toy_model, save_model

__version__ = "0.1.0"

__all__ = [
    "ExporterConfig",
    "ExporterError",
    "ModelLoadError",
    "ShapeMismatchError",
    "ToyDenseModel",
    "export_feature_map",
    "load_model",
    "make_toy_model",
    "save_model",
    "write_dfmp",
    "__version__",
]
