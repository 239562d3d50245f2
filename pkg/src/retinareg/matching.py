"""Descriptor matching and robust homography estimation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    DimensionMismatchError,
    InsufficientMatchesError,
    NoModelError,
)
from .features import DenseFeatureMap
from .geometry import (
    Homography,
    as_points,
    estimate_homography_dlt,
    reprojection_errors,
)
from .keypoints import KeypointSet, confidence_heatmap, extract_keypoints, sample_descriptors


@dataclass
class MatchSet:
    """Mutual nearest-neighbor matches, distance-ascending."""

    idx_a: np.ndarray     # (n,) int64 indices into the first keypoint set
    idx_b: np.ndarray     # (n,) int64 indices into the second keypoint set
    distance: np.ndarray  # (n,) float64 descriptor distances

    def __len__(self) -> int:
        return self.idx_a.shape[0]

    @classmethod
    def empty(cls) -> "MatchSet":
        return cls(np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0))


def mutual_nn_match(desc_a, desc_b) -> MatchSet:
    """Brute-force mutual nearest neighbors by Euclidean descriptor distance.

    (i, j) is kept iff j is the closest descriptor to a_i and i is the
    closest to b_j, argmin ties broken by the smallest index.  Output is
    sorted by distance, then (idx_a, idx_b).
    """
    da = np.asarray(desc_a, np.float64)
    db = np.asarray(desc_b, np.float64)
    if da.ndim != 2 or db.ndim != 2 or da.shape[1] != db.shape[1]:
        raise DimensionMismatchError(f"incompatible descriptor shapes {da.shape} and {db.shape}")
    if da.shape[0] == 0 or db.shape[0] == 0:
        return MatchSet.empty()
    # squared distances rank identically; sqrt only the selected matches
    sq = (da * da).sum(axis=1)[:, None] - 2.0 * (da @ db.T) + (db * db).sum(axis=1)[None, :]
    np.maximum(sq, 0.0, out=sq)
    nn_of_a = sq.argmin(axis=1)
    nn_of_b = sq.argmin(axis=0)
    ia = np.arange(da.shape[0])
    mutual = nn_of_b[nn_of_a] == ia
    idx_a = ia[mutual].astype(np.int64)
    idx_b = nn_of_a[mutual].astype(np.int64)
    dist = np.sqrt(sq[idx_a, idx_b])
    order = np.lexsort((idx_b, idx_a, dist))
    return MatchSet(idx_a[order], idx_b[order], dist[order])


# ---------------------------------------------------------------------------
# RANSAC

@dataclass(frozen=True)
class RansacConfig:
    reproj_threshold: float = 5.0
    max_iterations: int = 5000
    confidence: float = 0.9999
    seed: Optional[int] = None  # None: take the pipeline seed

    def __post_init__(self):
        if self.reproj_threshold <= 0:
            raise ValueError("reprojection threshold must be positive")
        if not 0.0 < self.confidence < 1.0:
            raise ValueError("confidence must lie strictly between 0 and 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


def _sample_degenerate(pts: np.ndarray) -> bool:
    """Any 3 of the 4 points collinear within a 1 px^2 triangle area."""
    for i0, i1, i2 in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        ax, ay = pts[i0]
        bx, by = pts[i1]
        cx, cy = pts[i2]
        area2 = abs((bx - ax) * (cy - ay) - (by - ay) * (cx - ax))
        if area2 <= 2.0:
            return True
    return False


def ransac_homography(src, dst, cfg: RansacConfig = RansacConfig(), seed: Optional[int] = None):
    """Robust homography from noisy correspondences.

    Seeded minimal 4-point DLT hypotheses, one-directional reprojection-error
    inlier counting (ties by lower mean inlier error), adaptive early exit at
    the configured confidence, and a final normalized-DLT refit on the best
    model's inliers with the mask recomputed against the refit.

    Returns (Homography, inlier_mask over the input correspondences).
    """
    src = as_points(src)
    dst = as_points(dst)
    n = src.shape[0]
    if n != dst.shape[0]:
        raise ValueError("source and target counts differ")
    if n < 4:
        raise InsufficientMatchesError(f"RANSAC needs >= 4 correspondences, got {n}")

    if cfg.seed is not None:
        seed = cfg.seed
    rng = np.random.default_rng(0 if seed is None else seed)
    thresh = cfg.reproj_threshold

    best_count = 0
    best_mean = np.inf
    best_mask = None
    best_h = None
    needed = float(cfg.max_iterations)
    it = 0
    while it < cfg.max_iterations and it < needed:
        it += 1
        pick = rng.choice(n, size=4, replace=False)
        s4 = src[pick]
        d4 = dst[pick]
        if _sample_degenerate(s4) or _sample_degenerate(d4):
            continue
        try:
            h = estimate_homography_dlt(s4, d4)
        except DegenerateConfigurationError:
            continue
        errors = reprojection_errors(h, src, dst)
        mask = errors <= thresh
        count = int(mask.sum())
        if count == 0:
            continue
        mean_err = float(errors[mask].mean())
        if count > best_count or (count == best_count and mean_err < best_mean):
            best_count = count
            best_mean = mean_err
            best_mask = mask
            best_h = h
            w = best_count / n
            if w >= 1.0:
                break
            denom = math.log1p(-min(w ** 4, 1.0 - 1e-16))
            needed = math.log1p(-cfg.confidence) / denom

    if best_h is None or best_count < 4:
        raise NoModelError(f"no sample reached 4 inliers within {cfg.max_iterations} iterations")

    try:
        refit = estimate_homography_dlt(src[best_mask], dst[best_mask])
    except DegenerateConfigurationError:
        refit = best_h
    final_errors = reprojection_errors(refit, src, dst)
    final_mask = final_errors <= thresh
    return refit, final_mask


# ---------------------------------------------------------------------------
# full pair registration

class RegistrationStatus(enum.Enum):
    OK = "OK"
    TOO_FEW_MATCHES = "TooFewMatches"
    RANSAC_FAILED = "RansacFailed"


@dataclass
class RegistrationResult:
    status: RegistrationStatus
    homography: Optional[Homography]
    matches: MatchSet
    inlier_mask: np.ndarray
    keypoints_a: int
    keypoints_b: int
    seed: int
    kps_a: KeypointSet
    kps_b: KeypointSet

    @property
    def num_inliers(self) -> int:
        return int(self.inlier_mask.sum())


def register_pair(fm_a: DenseFeatureMap, fm_b: DenseFeatureMap, cfg) -> RegistrationResult:
    """Heatmap -> keypoints -> descriptors -> mutual NN -> RANSAC.

    cfg is a PipelineConfig (n_max, nms_radius, min_confidence, ransac,
    seed).  Stage failures map to the result status; no exceptions escape
    for valid feature maps.
    """
    seed = cfg.seed if cfg.ransac.seed is None else cfg.ransac.seed

    kps_a = extract_keypoints(confidence_heatmap(fm_a), cfg.n_max, cfg.min_confidence, cfg.nms_radius)
    kps_b = extract_keypoints(confidence_heatmap(fm_b), cfg.n_max, cfg.min_confidence, cfg.nms_radius)
    desc_a = sample_descriptors(fm_a, kps_a)
    desc_b = sample_descriptors(fm_b, kps_b)
    matches = mutual_nn_match(desc_a, desc_b)

    base = dict(matches=matches, keypoints_a=len(kps_a), keypoints_b=len(kps_b),
                seed=seed, kps_a=kps_a, kps_b=kps_b)
    if len(matches) < 4:
        return RegistrationResult(status=RegistrationStatus.TOO_FEW_MATCHES,
                                  homography=None,
                                  inlier_mask=np.zeros(len(matches), bool), **base)
    src = kps_a.xy[matches.idx_a]
    dst = kps_b.xy[matches.idx_b]
    try:
        h, mask = ransac_homography(src, dst, cfg.ransac, seed=seed)
    except NoModelError:
        return RegistrationResult(status=RegistrationStatus.RANSAC_FAILED,
                                  homography=None,
                                  inlier_mask=np.zeros(len(matches), bool), **base)
    return RegistrationResult(status=RegistrationStatus.OK, homography=h,
                              inlier_mask=mask, **base)
