"""Dense detector/descriptor maps: preprocessing, the deterministic reference
extractor, and the "DFMP" interchange file format.

The map contract is a stride-4 grid of 2-channel detector logits (vessel,
background) plus a descriptor per cell, so any backend that can serialize
that grid (a CNN exporter, this reference extractor) plugs into the same
pipeline.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import FormatError, ImageTooSmallError


class Modality(enum.Enum):
    CF = "CF"
    FA = "FA"
    IR = "IR"
    OCT = "OCT"
    OCTA = "OCTA"
    SYNTH_A = "SYNTH_A"
    SYNTH_B = "SYNTH_B"


#: Modalities depicting vessels bright; preprocessing inverts them so all
#: modalities show vessels dark.
INVERTED_MODALITIES = frozenset({Modality.FA, Modality.OCT, Modality.OCTA})


def as_image(img) -> np.ndarray:
    """Validate an image buffer: float64, values in [0, 1], 1 or 3 channels."""
    arr = np.asarray(img, np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"expected HxW, HxWx1 or HxWx3 image, got shape {np.shape(img)}")
    if arr.size == 0:
        raise ValueError("empty image")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image has non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return arr


def preprocess_image(img, modality: Modality) -> np.ndarray:
    """Invert bright-vessel modalities and replicate grayscale to 3 channels."""
    arr = as_image(img)
    if modality in INVERTED_MODALITIES:
        arr = 1.0 - arr
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr


def intensity(img) -> np.ndarray:
    """Mean over channels as a 2-D float64 array."""
    arr = np.asarray(img, np.float64)
    if arr.ndim == 3:
        return arr.mean(axis=2)
    return arr


# ---------------------------------------------------------------------------
# dense feature map

@dataclass
class DenseFeatureMap:
    """Stride-s grid of detector logits and descriptors for one image.

    detector_logits: (grid_h, grid_w, 2) float32, channel 0 vessel, 1 background.
    descriptors:     (grid_h, grid_w, d) float32, d >= 2.
    Grid dims must equal ceil(source / stride).
    """

    source_w: int
    source_h: int
    stride: int
    detector_logits: np.ndarray
    descriptors: np.ndarray

    def __post_init__(self):
        self.detector_logits = np.ascontiguousarray(self.detector_logits, np.float32)
        self.descriptors = np.ascontiguousarray(self.descriptors, np.float32)
        gw = -(-self.source_w // self.stride)
        gh = -(-self.source_h // self.stride)
        if self.source_w < 1 or self.source_h < 1 or self.stride < 1:
            raise ValueError("source dims and stride must be positive")
        if self.detector_logits.shape != (gh, gw, 2):
            raise ValueError(
                f"detector logits shape {self.detector_logits.shape} != ({gh}, {gw}, 2)")
        if self.descriptors.ndim != 3 or self.descriptors.shape[:2] != (gh, gw):
            raise ValueError(
                f"descriptor grid shape {self.descriptors.shape} inconsistent with ({gh}, {gw})")
        if self.descriptors.shape[2] < 2:
            raise ValueError("descriptor dimension must be >= 2")
        if not (np.all(np.isfinite(self.detector_logits)) and np.all(np.isfinite(self.descriptors))):
            raise ValueError("feature map has non-finite values")

    @property
    def grid_w(self) -> int:
        return self.detector_logits.shape[1]

    @property
    def grid_h(self) -> int:
        return self.detector_logits.shape[0]

    @property
    def descriptor_dim(self) -> int:
        return self.descriptors.shape[2]


def feature_maps_equal(a: DenseFeatureMap, b: DenseFeatureMap) -> bool:
    return (a.source_w == b.source_w and a.source_h == b.source_h
            and a.stride == b.stride
            and np.array_equal(a.detector_logits, b.detector_logits)
            and np.array_equal(a.descriptors, b.descriptors))


# ---------------------------------------------------------------------------
# reference extractor

@dataclass(frozen=True)
class ReferenceExtractorConfig:
    """Knobs of the deterministic junction/gradient-histogram extractor."""

    stride: int = 4
    window: int = 32
    spatial_bins: int = 4
    orientation_bins: int = 8
    ridge_scales: tuple = (1.0, 2.0, 4.0)
    tensor_sigma: float = 2.0
    anti_alias_sigma: float = 2.0  # band-limits the response to the grid Nyquist
    min_size: int = 64

    @property
    def descriptor_dim(self) -> int:
        return self.spatial_bins * self.spatial_bins * self.orientation_bins


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    r = int(math.ceil(3.0 * sigma))
    x = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge replication."""
    k = _gaussian_kernel1d(sigma)
    r = k.size // 2
    h, w = img.shape
    p = np.pad(img, ((0, 0), (r, r)), mode="edge")
    out = np.zeros((h, w))
    for i in range(k.size):
        out += k[i] * p[:, i:i + w]
    p = np.pad(out, ((r, r), (0, 0)), mode="edge")
    out = np.zeros((h, w))
    for i in range(k.size):
        out += k[i] * p[i:i + h, :]
    return out


def _shifted(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """img[y+dy, x+dx] with edge replication."""
    h, w = img.shape
    ys = np.clip(np.arange(h) + dy, 0, h - 1)
    xs = np.clip(np.arange(w) + dx, 0, w - 1)
    return img[ys][:, xs]


def _central_gradients(img: np.ndarray):
    gx = 0.5 * (_shifted(img, 0, 1) - _shifted(img, 0, -1))
    gy = 0.5 * (_shifted(img, 1, 0) - _shifted(img, -1, 0))
    return gx, gy


def junction_response(gray: np.ndarray, cfg: ReferenceExtractorConfig) -> np.ndarray:
    """Full-resolution response that peaks at bifurcations and sharp bends.

    Dark ridges are detected per scale by the positive Hessian eigenvalue
    (scale-normalized), combined across scales by the maximum; junctions are
    then localized as corners of that vesselness map via the Foerstner
    measure det(J)/trace(J) of its smoothed structure tensor.
    """
    ridge = np.zeros_like(gray)
    for sigma in cfg.ridge_scales:
        g = gaussian_blur(gray, sigma)
        ixx = _shifted(g, 0, 1) - 2.0 * g + _shifted(g, 0, -1)
        iyy = _shifted(g, 1, 0) - 2.0 * g + _shifted(g, -1, 0)
        ixy = 0.25 * (_shifted(g, 1, 1) - _shifted(g, 1, -1)
                      - _shifted(g, -1, 1) + _shifted(g, -1, -1))
        lam = 0.5 * ((ixx + iyy) + np.sqrt((ixx - iyy) ** 2 + 4.0 * ixy * ixy))
        np.maximum(ridge, (sigma * sigma) * np.maximum(lam, 0.0), out=ridge)

    rx, ry = _central_gradients(ridge)
    j11 = gaussian_blur(rx * rx, cfg.tensor_sigma)
    j22 = gaussian_blur(ry * ry, cfg.tensor_sigma)
    j12 = gaussian_blur(rx * ry, cfg.tensor_sigma)
    det = j11 * j22 - j12 * j12
    corner = np.maximum(det, 0.0) / (j11 + j22 + 1e-12)
    if cfg.anti_alias_sigma > 0:
        # the corner field is sharper than the sampling grid; band-limit it so
        # the bicubic reconstruction localizes peaks at sub-cell accuracy
        corner = gaussian_blur(corner, cfg.anti_alias_sigma)
    return corner


def cell_centers(n_cells: int, stride: int) -> np.ndarray:
    """Full-resolution coordinate of each cell center along one axis."""
    return np.arange(n_cells, dtype=np.float64) * stride + (stride - 1) / 2.0


def reference_extract(img, cfg: ReferenceExtractorConfig = ReferenceExtractorConfig()) -> DenseFeatureMap:
    """Deterministic stand-in for a learned extractor.

    Vessel logit per cell samples the junction response at the cell center;
    background logit is its negation.  The per-cell descriptor is a
    gradient-orientation histogram (spatial_bins^2 x orientation_bins) over a
    window centered on the cell, computed on the contrast-normalized
    intensity and L2-normalized (all-zero gradients yield the zero vector).
    """
    arr = as_image(img)
    h, w = arr.shape[:2]
    if min(h, w) < cfg.min_size:
        raise ImageTooSmallError(f"image {w}x{h} below minimum size {cfg.min_size}")
    stride = cfg.stride
    gw = -(-w // stride)
    gh = -(-h // stride)

    gray = intensity(arr)

    # detector: junction response sampled at cell centers
    resp = junction_response(gray, cfg)
    cx = np.repeat(cell_centers(gw, stride)[None, :], gh, axis=0).ravel()
    cy = np.repeat(cell_centers(gh, stride)[:, None], gw, axis=1).ravel()
    vessel = kernels.bilinear_sample_map(resp, cx, cy).reshape(gh, gw)
    logits = np.stack([vessel, -vessel], axis=2)

    # descriptors: orientation histograms of the normalized-intensity gradients
    norm = (gray - gray.mean()) / (gray.std() + 1e-8)
    gx, gy = _central_gradients(norm)
    mag = np.hypot(gx, gy)
    ori = np.arctan2(gy, gx)
    n_ori = cfg.orientation_bins
    t = (ori + math.pi) * (n_ori / (2.0 * math.pi))
    b0f = np.floor(t)
    frac = t - b0f
    b0 = b0f.astype(np.int64) % n_ori
    b1 = (b0 + 1) % n_ori
    m0 = mag * (1.0 - frac)
    m1 = mag * frac

    pad_t = (cfg.window - stride) // 2
    pad_b = (gh - 1) * stride + cfg.window - pad_t - h
    pad_l = pad_t
    pad_r = (gw - 1) * stride + cfg.window - pad_l - w
    spec = ((pad_t, pad_b), (pad_l, pad_r))
    hist = kernels.orientation_histograms(
        np.pad(b0, spec, mode="edge"), np.pad(b1, spec, mode="edge"),
        np.pad(m0, spec, mode="edge"), np.pad(m1, spec, mode="edge"),
        gh, gw, stride, cfg.window, cfg.spatial_bins, n_ori)

    norms = np.sqrt((hist * hist).sum(axis=2, keepdims=True))
    desc = np.where(norms > 1e-12, hist / np.where(norms > 0, norms, 1.0), 0.0)

    return DenseFeatureMap(source_w=w, source_h=h, stride=stride,
                           detector_logits=logits, descriptors=desc)


# ---------------------------------------------------------------------------
# "DFMP" interchange file: magic + version + u32 dims + f32 payload,
# little-endian, no padding, no compression.

DFMP_MAGIC = b"DFMP"
DFMP_VERSION = 1
_HEADER = struct.Struct("<4sB6I")


def save_feature_map(fm: DenseFeatureMap, path) -> None:
    header = _HEADER.pack(DFMP_MAGIC, DFMP_VERSION, fm.source_w, fm.source_h,
                          fm.stride, fm.grid_w, fm.grid_h, fm.descriptor_dim)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(fm.detector_logits.astype("<f4", copy=False).tobytes())
        fh.write(fm.descriptors.astype("<f4", copy=False).tobytes())


def load_feature_map(path) -> DenseFeatureMap:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise FormatError("file shorter than the DFMP header")
    magic, version, sw, sh, stride, gw, gh, dim = _HEADER.unpack_from(blob)
    if magic != DFMP_MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != DFMP_VERSION:
        raise FormatError(f"unsupported DFMP version {version}")
    if stride < 1 or sw < 1 or sh < 1 or dim < 2:
        raise FormatError("invalid header dimensions")
    if gw != -(-sw // stride) or gh != -(-sh // stride):
        raise FormatError(
            f"grid {gw}x{gh} does not match ceil({sw}x{sh} / {stride})")
    n_logit = gh * gw * 2
    n_desc = gh * gw * dim
    expected = _HEADER.size + 4 * (n_logit + n_desc)
    if len(blob) != expected:
        raise FormatError(f"payload holds {len(blob) - _HEADER.size} bytes, expected {expected - _HEADER.size}")
    floats = np.frombuffer(blob, dtype="<f4", offset=_HEADER.size)
    logits = floats[:n_logit].reshape(gh, gw, 2).copy()
    desc = floats[n_logit:].reshape(gh, gw, dim).copy()
    try:
        return DenseFeatureMap(source_w=sw, source_h=sh, stride=stride,
                               detector_logits=logits, descriptors=desc)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
