"""Exception types shared across the pipeline."""


class RetinaRegError(Exception):
    """Base class for all library errors."""


# geometry
class DegeneratePointError(RetinaRegError):
    """A point projects to infinity (|w| below tolerance)."""


class DegenerateHomographyError(RetinaRegError):
    """Matrix is not an invertible homography."""


class InsufficientPointsError(RetinaRegError):
    """Fewer correspondences than the estimator needs."""


class DegenerateConfigurationError(RetinaRegError):
    """Correspondence geometry does not determine a homography."""


class WrongCountError(RetinaRegError):
    """Control-point set has the wrong number of points."""


# features / keypoints
class ImageTooSmallError(RetinaRegError):
    """Image below the extractor's minimum size."""


class FormatError(RetinaRegError):
    """Malformed feature-map file (magic, version, dims, or payload)."""


class BadFactorError(RetinaRegError):
    """Upsampling factor below 1."""


class DimensionMismatchError(RetinaRegError):
    """Array shapes are inconsistent with each other or the declared dims."""


# matching-side alias for the same condition
DimMismatchError = DimensionMismatchError


class OutOfBoundsError(RetinaRegError):
    """Coordinate outside the valid image area."""


# matching
class InsufficientMatchesError(RetinaRegError):
    """Fewer than 4 correspondences for RANSAC."""


class NoModelError(RetinaRegError):
    """RANSAC found no sample with enough inliers."""


# losses
class BatchTooSmallError(RetinaRegError):
    """Hard-negative mining needs at least two pairs."""


class EmptyStratumError(RetinaRegError):
    """A (class, modality) stratum has no samples."""


class IndivisibleBatchError(RetinaRegError):
    """Batch size not divisible by the stratum count."""


class EmptyDatasetError(RetinaRegError):
    """Training pools are empty."""


# metrics
class EmptyInputError(RetinaRegError):
    """Metric computed over zero pairs."""


class InvalidCountsError(RetinaRegError):
    """Inlier count exceeds match count."""


class MissingAnnotationError(RetinaRegError):
    """Evaluation pair lacks its control-point annotation."""


# dataset
class SchemaError(RetinaRegError):
    """Annotation or manifest JSON violates the schema."""


class BoundsError(RetinaRegError):
    """Annotated coordinate outside the image."""


class MissingLinkError(RetinaRegError):
    """A pair link references an unknown image."""


class MissingLinkWarning(UserWarning):
    """Annotations carry no pair links; descriptor pool will be empty."""


class AllPointsCroppedError(RetinaRegError):
    """Joint augmentation dropped every keypoint."""


class ConfigError(RetinaRegError):
    """Invalid or unknown configuration value."""
