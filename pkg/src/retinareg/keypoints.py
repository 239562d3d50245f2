"""Keypoints from dense maps: bicubic upsampling, confidence heatmap,
non-maximum suppression, top-N extraction, descriptor interpolation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import OutOfBoundsError
from .features import DenseFeatureMap

DEFAULT_NMS_RADIUS = 4.0
DEFAULT_N_MAX = 4000


@dataclass
class KeypointSet:
    """Integer-pixel keypoints with confidences, confidence-descending."""

    xy: np.ndarray    # (n, 2) float64, full-resolution pixel coordinates
    conf: np.ndarray  # (n,) float64

    def __len__(self) -> int:
        return self.xy.shape[0]

    @classmethod
    def empty(cls) -> "KeypointSet":
        return cls(np.empty((0, 2)), np.empty(0))


def upsample_bicubic(channel, factor: int, out_w: int, out_h: int) -> np.ndarray:
    """Catmull-Rom upsample of one grid channel, cropped to out_w x out_h."""
    return kernels.bicubic_upsample(channel, factor, out_h, out_w)


def confidence_heatmap(fm: DenseFeatureMap) -> np.ndarray:
    """Upscaled difference of the two detector channels at source resolution.

    The difference is upsampled once; by linearity of the interpolation this
    equals upsampling both channels and subtracting.
    """
    diff = (fm.detector_logits[:, :, 0].astype(np.float64)
            - fm.detector_logits[:, :, 1].astype(np.float64))
    return upsample_bicubic(diff, fm.stride, fm.source_w, fm.source_h)


def _greedy_candidates(heatmap: np.ndarray):
    """Flatten and order pixels: confidence descending, row-major ties."""
    flat = heatmap.ravel()
    order = np.argsort(-flat, kind="stable")
    return order, flat


def nms(heatmap, radius: float = DEFAULT_NMS_RADIUS) -> KeypointSet:
    """Greedy non-maximum suppression over every pixel of the heatmap.

    Pixels are visited by descending confidence (ties by row-major index);
    a pixel is kept iff no previously kept pixel lies within Euclidean
    distance <= radius.
    """
    heatmap = np.asarray(heatmap, np.float64)
    if radius < 1:
        raise ValueError(f"nms radius must be >= 1, got {radius}")
    h, w = heatmap.shape
    order, flat = _greedy_candidates(heatmap)
    ys, xs = np.divmod(order, w)
    keep = kernels.greedy_nms(ys, xs, h, w, float(radius))
    return KeypointSet(
        xy=np.stack([xs[keep], ys[keep]], axis=1).astype(np.float64),
        conf=flat[order[keep]],
    )


def extract_keypoints(heatmap, n_max: int = DEFAULT_N_MAX,
                      min_confidence: float = 0.0,
                      radius: float = DEFAULT_NMS_RADIUS) -> KeypointSet:
    """Top-n_max NMS keypoints with confidence strictly above min_confidence.

    Equivalent to filtering and truncating the full `nms` output: candidates
    at or below min_confidence can never suppress an accepted one because
    greedy order is confidence-descending.
    """
    heatmap = np.asarray(heatmap, np.float64)
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    h, w = heatmap.shape
    flat = heatmap.ravel()
    cand = np.nonzero(flat > min_confidence)[0]
    if cand.size == 0:
        return KeypointSet.empty()
    order = cand[np.argsort(-flat[cand], kind="stable")]
    ys, xs = np.divmod(order, w)
    keep = kernels.greedy_nms(ys, xs, h, w, float(radius), max_keep=n_max)
    return KeypointSet(
        xy=np.stack([xs[keep], ys[keep]], axis=1).astype(np.float64),
        conf=flat[order[keep]],
    )


def sample_descriptors(fm: DenseFeatureMap, kps: KeypointSet) -> np.ndarray:
    """Bilinearly interpolated, L2-normalized descriptor per keypoint.

    Keypoint (x, y) reads descriptor-grid coordinate ((x + 0.5)/stride - 0.5,
    (y + 0.5)/stride - 0.5), clamped at the grid edges.  Zero vectors stay
    zero.
    """
    if len(kps) == 0:
        return np.empty((0, fm.descriptor_dim))
    x = kps.xy[:, 0]
    y = kps.xy[:, 1]
    if (x.min() < 0 or y.min() < 0 or x.max() >= fm.source_w or y.max() >= fm.source_h):
        raise OutOfBoundsError("keypoint outside the source image bounds")
    gx = (x + 0.5) / fm.stride - 0.5
    gy = (y + 0.5) / fm.stride - 0.5
    desc = kernels.bilinear_grid_sample(fm.descriptors.astype(np.float64), gx, gy)
    norms = np.sqrt((desc * desc).sum(axis=1, keepdims=True))
    return np.where(norms > 1e-12, desc / np.where(norms > 0, norms, 1.0), 0.0)
