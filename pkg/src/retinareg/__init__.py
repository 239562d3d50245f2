"""Multi-modal retinal image registration pipeline.

Keypoint detection from dense confidence maps, cross-modal descriptor
matching, robust homography estimation, the training losses behind the
feature extractor, and the evaluation metric suite.  The neural backend is
abstracted behind the DenseFeatureMap / "DFMP" interchange format.
"""

from .config import MetricThresholds, PipelineConfig
from .features import (
    DenseFeatureMap,
    Modality,
    ReferenceExtractorConfig,
    load_feature_map,
    preprocess_image,
    reference_extract,
    save_feature_map,
)
from .geometry import (
    Homography,
    apply_homography,
    corner_transfer_error,
    estimate_homography_dlt,
    ground_truth_homography,
)
from .keypoints import (
    KeypointSet,
    confidence_heatmap,
    extract_keypoints,
    nms,
    sample_descriptors,
    upsample_bicubic,
)
from .matching import (
    MatchSet,
    RansacConfig,
    RegistrationResult,
    RegistrationStatus,
    mutual_nn_match,
    ransac_homography,
    register_pair,
)

__version__ = "0.1.0"

__all__ = [
    "DenseFeatureMap",
    "Homography",
    "KeypointSet",
    "MatchSet",
    "MetricThresholds",
    "Modality",
    "PipelineConfig",
    "RansacConfig",
    "ReferenceExtractorConfig",
    "RegistrationResult",
    "RegistrationStatus",
    "apply_homography",
    "confidence_heatmap",
    "corner_transfer_error",
    "estimate_homography_dlt",
    "extract_keypoints",
    "ground_truth_homography",
    "load_feature_map",
    "mutual_nn_match",
    "nms",
    "preprocess_image",
    "ransac_homography",
    "reference_extract",
    "register_pair",
    "sample_descriptors",
    "save_feature_map",
    "upsample_bicubic",
    "__version__",
]
