"""Data plumbing: annotation schema, patch extraction, augmentation, training
pools, and a seeded synthetic multi-modal vessel-image generator.

The generator renders a random branching vessel tree dark-on-light, renders
the second image of a pair from the homography-warped geometry (not by
resampling pixels), applies per-side modality transforms, and emits exact
ground-truth correspondences at the bifurcations.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AllPointsCroppedError,
    BoundsError,
    ConfigError,
    MissingLinkError,
    MissingLinkWarning,
    SchemaError,
)
from .features import Modality, gaussian_blur, preprocess_image
from .geometry import Homography, apply_homography

PATCH = 32
_HALF_LO = PATCH // 2 - 1   # rows [c-15, c+16] put the center at patch[15, 15]


# ---------------------------------------------------------------------------
# annotations

@dataclass
class Link:
    other: str
    index_map: np.ndarray  # (k, 2) int64 keypoint index pairs (self, other)


@dataclass
class AnnotationSet:
    ann_id: str
    image: str
    modality: Modality
    acquisition: str
    keypoints: np.ndarray        # (n, 2) float64
    keypoint_classes: list       # "vessel" | "background" per keypoint
    control_points: np.ndarray   # (0 or 6, 2) float64
    links: list = field(default_factory=list)


def _require(data: dict, key: str, path):
    if key not in data:
        raise SchemaError(f"{path}: missing field {key!r}")
    return data[key]


def load_annotations(path) -> AnnotationSet:
    """Parse and validate one annotation JSON document."""
    path = Path(path)
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise SchemaError(f"{path}: top level must be an object")
    allowed = {"image", "modality", "acquisition", "keypoints", "control_points", "links"}
    unknown = set(data) - allowed
    if unknown:
        raise SchemaError(f"{path}: unknown field(s) {sorted(unknown)}")

    image = _require(data, "image", path)
    try:
        modality = Modality(_require(data, "modality", path))
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    acquisition = data.get("acquisition", "")

    kp_entries = _require(data, "keypoints", path)
    kps = []
    classes = []
    for i, entry in enumerate(kp_entries):
        if not {"x", "y", "class"} <= set(entry):
            raise SchemaError(f"{path}: keypoint {i} needs x, y, class")
        if entry["class"] not in ("vessel", "background"):
            raise SchemaError(f"{path}: keypoint {i} has class {entry['class']!r}")
        kps.append((float(entry["x"]), float(entry["y"])))
        classes.append(entry["class"])
    kps = np.asarray(kps, np.float64).reshape(len(kps), 2)

    cp_entries = _require(data, "control_points", path)
    if len(cp_entries) not in (0, 6):
        raise SchemaError(f"{path}: control_points must hold 0 or 6 points, got {len(cp_entries)}")
    cps = np.asarray([(float(e["x"]), float(e["y"])) for e in cp_entries],
                     np.float64).reshape(len(cp_entries), 2)

    links = []
    for i, entry in enumerate(data.get("links", [])):
        if not {"other", "index_map"} <= set(entry):
            raise SchemaError(f"{path}: link {i} needs other, index_map")
        index_map = np.asarray(entry["index_map"], np.int64).reshape(-1, 2)
        if index_map.size and (index_map[:, 0].max() >= len(kps) or index_map.min() < 0):
            raise SchemaError(f"{path}: link {i} index_map out of range")
        links.append(Link(other=str(entry["other"]), index_map=index_map))

    for name, pts in (("keypoint", kps), ("control point", cps)):
        if pts.size and pts.min() < 0:
            raise BoundsError(f"{path}: negative {name} coordinate")

    img_path = path.parent / image
    if img_path.exists():
        from .imageio import load_image
        h, w = load_image(img_path).shape[:2]
        for name, pts in (("keypoint", kps), ("control point", cps)):
            if pts.size and (pts[:, 0].max() >= w or pts[:, 1].max() >= h):
                raise BoundsError(f"{path}: {name} outside the {w}x{h} image")

    return AnnotationSet(ann_id=path.stem, image=image, modality=modality,
                         acquisition=acquisition, keypoints=kps,
                         keypoint_classes=classes, control_points=cps, links=links)


def save_annotation(ann: AnnotationSet, path) -> None:
    data = {
        "image": ann.image,
        "modality": ann.modality.value,
        "acquisition": ann.acquisition,
        "keypoints": [{"x": float(x), "y": float(y), "class": c}
                      for (x, y), c in zip(ann.keypoints, ann.keypoint_classes)],
        "control_points": [{"x": float(x), "y": float(y)} for x, y in ann.control_points],
        "links": [{"other": l.other, "index_map": l.index_map.tolist()} for l in ann.links],
    }
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# patches

def extract_patch(img, center) -> np.ndarray:
    """32x32 window centered at the rounded center, edge-replicated.

    The center pixel lands at patch index (15, 15).
    """
    arr = np.asarray(img, np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("extract_patch expects a preprocessed HxWx3 image")
    h, w = arr.shape[:2]
    cx = int(round(float(center[0])))
    cy = int(round(float(center[1])))
    ys = np.clip(np.arange(cy - _HALF_LO, cy - _HALF_LO + PATCH), 0, h - 1)
    xs = np.clip(np.arange(cx - _HALF_LO, cx - _HALF_LO + PATCH), 0, w - 1)
    return arr[np.ix_(ys, xs)]


# ---------------------------------------------------------------------------
# augmentation

def augment_single(img, seed, jitter: bool = True, flip_h=None, flip_v=None) -> np.ndarray:
    """Seeded brightness/contrast jitter plus independent random flips.

    flip_h / flip_v override the coin flips when not None.
    """
    arr = np.array(img, np.float64, copy=True)
    rng = np.random.default_rng(seed)
    if jitter:
        mult = rng.uniform(0.8, 1.25)
        add = rng.uniform(-0.1, 0.1)
        arr = np.clip(arr * mult + add, 0.0, 1.0)
    do_h = rng.random() < 0.5 if flip_h is None else bool(flip_h)
    do_v = rng.random() < 0.5 if flip_v is None else bool(flip_v)
    if do_h:
        arr = arr[:, ::-1]
    if do_v:
        arr = arr[::-1, :]
    return np.ascontiguousarray(arr)


def similarity_about_center(width: int, height: int, rotation_rad: float, scale: float) -> np.ndarray:
    """3x3 affine rotating and scaling about the image center."""
    cx = (width - 1) / 2.0
    cy = (height - 1) / 2.0
    c = math.cos(rotation_rad) * scale
    s = math.sin(rotation_rad) * scale
    return np.array([
        [c, -s, cx - c * cx + s * cy],
        [s, c, cy - s * cx - c * cy],
        [0.0, 0.0, 1.0],
    ])


def warp_image(img, matrix, out_shape, fill=None) -> np.ndarray:
    """Warp img by the forward transform: out(matrix p) = img(p).

    Implemented by inverse-map bilinear sampling; outside samples are
    edge-clamped, or set to ``fill`` when given.
    """
    return warp_image_lookup(img, np.linalg.inv(np.asarray(matrix, np.float64)), out_shape, fill)


def warp_image_lookup(img, lookup, out_shape, fill=None) -> np.ndarray:
    """out(p) = img(lookup(p)) with bilinear sampling."""
    from . import kernels

    arr = np.asarray(img, np.float64)
    squeeze = arr.ndim == 2
    if squeeze:
        arr = arr[:, :, None]
    out_h, out_w = out_shape
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    pts = np.stack([xs.ravel(), ys.ravel()], axis=1)
    src = apply_homography(Homography(lookup), pts)
    sampled = kernels.bilinear_grid_sample(arr, src[:, 0], src[:, 1])
    out = sampled.reshape(out_h, out_w, arr.shape[2])
    if fill is not None:
        h, w = arr.shape[:2]
        outside = ((src[:, 0] < 0) | (src[:, 0] > w - 1)
                   | (src[:, 1] < 0) | (src[:, 1] > h - 1)).reshape(out_h, out_w)
        out[outside] = fill
    return out[:, :, 0] if squeeze else out


@dataclass(frozen=True)
class PairAugmentConfig:
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    crop_fraction: float = 0.9


@dataclass
class PairAugmentResult:
    img_a: np.ndarray
    img_b: np.ndarray
    kps_a: np.ndarray
    kps_b: np.ndarray
    survivors: np.ndarray     # indices into the original correspondence list
    transform_a: np.ndarray   # 3x3 affines applied to each side's coordinates
    transform_b: np.ndarray


def _random_side_transform(rng, width, height, cfg: PairAugmentConfig):
    theta = math.radians(rng.uniform(-cfg.max_rotation_deg, cfg.max_rotation_deg))
    scale = rng.uniform(*cfg.scale_range)
    cw = max(1, int(round(width * cfg.crop_fraction)))
    ch = max(1, int(round(height * cfg.crop_fraction)))
    ox = int(rng.integers(0, width - cw + 1))
    oy = int(rng.integers(0, height - ch + 1))
    m = similarity_about_center(width, height, theta, scale)
    shift = np.array([[1.0, 0.0, -ox], [0.0, 1.0, -oy], [0.0, 0.0, 1.0]])
    return shift @ m, (ch, cw)


def augment_pair(img_a, img_b, kps_a, kps_b, seed,
                 cfg: PairAugmentConfig = PairAugmentConfig(),
                 transform_a=None, transform_b=None) -> PairAugmentResult:
    """Joint similarity + crop augmentation of a linked pair.

    Each side gets its own transform, applied identically to the image and
    its keypoint coordinates; correspondences whose keypoint falls outside
    either crop are dropped from both sides.  Explicit transforms (3x3
    affine + output shape untouched) override the random draw for tests.
    """
    img_a = np.asarray(img_a, np.float64)
    img_b = np.asarray(img_b, np.float64)
    kps_a = np.asarray(kps_a, np.float64).reshape(-1, 2)
    kps_b = np.asarray(kps_b, np.float64).reshape(-1, 2)
    if kps_a.shape != kps_b.shape:
        raise ValueError("keypoint correspondence lists must align")
    rng = np.random.default_rng(seed)

    if transform_a is None:
        t_a, shape_a = _random_side_transform(rng, img_a.shape[1], img_a.shape[0], cfg)
    else:
        t_a, shape_a = np.asarray(transform_a, np.float64), img_a.shape[:2]
    if transform_b is None:
        t_b, shape_b = _random_side_transform(rng, img_b.shape[1], img_b.shape[0], cfg)
    else:
        t_b, shape_b = np.asarray(transform_b, np.float64), img_b.shape[:2]

    out_a = warp_image(img_a, t_a, shape_a)
    out_b = warp_image(img_b, t_b, shape_b)
    new_a = apply_homography(Homography(t_a), kps_a) if kps_a.size else kps_a
    new_b = apply_homography(Homography(t_b), kps_b) if kps_b.size else kps_b

    def inside(pts, shape):
        return ((pts[:, 0] >= 0) & (pts[:, 0] <= shape[1] - 1)
                & (pts[:, 1] >= 0) & (pts[:, 1] <= shape[0] - 1))

    if kps_a.size:
        mask = inside(new_a, shape_a) & inside(new_b, shape_b)
        if not mask.any():
            raise AllPointsCroppedError("augmentation dropped every keypoint")
    else:
        mask = np.zeros(0, bool)
    survivors = np.nonzero(mask)[0]
    return PairAugmentResult(img_a=out_a, img_b=out_b,
                             kps_a=new_a[mask], kps_b=new_b[mask],
                             survivors=survivors, transform_a=t_a, transform_b=t_b)


# ---------------------------------------------------------------------------
# synthetic generator

@dataclass(frozen=True)
class ModalityTransform:
    """Appearance transform of one synthetic side."""

    label: str = "CF"
    invert: bool = False
    gamma: float = 1.0
    blur_sigma: float = 0.0
    noise_sigma: float = 0.0
    gradient_amplitude: float = 0.0


@dataclass(frozen=True)
class HomographyMagnitude:
    max_rotation_deg: float = 15.0
    scale_range: tuple = (0.9, 1.1)
    max_translation: float = 40.0
    perspective_jitter: float = 2e-5


@dataclass(frozen=True)
class SynthConfig:
    size: int = 512
    n_trees: int = 3
    max_depth: int = 5
    branch_prob: float = 0.14
    width_range: tuple = (2.2, 4.5)
    min_width: float = 0.9
    contrast: float = 0.7
    side_a: ModalityTransform = ModalityTransform(label="CF")
    side_b: ModalityTransform = ModalityTransform(
        label="FA", invert=True, gamma=0.85, blur_sigma=0.7,
        noise_sigma=0.01, gradient_amplitude=0.08)
    homography: HomographyMagnitude = HomographyMagnitude()
    seed: int = 0

    def __post_init__(self):
        if self.size < 64:
            raise ConfigError("synthetic image size must be >= 64")
        if self.n_trees < 1 or self.max_depth < 1:
            raise ConfigError("tree parameters must be positive")
        if not (0 < self.width_range[0] <= self.width_range[1]):
            raise ConfigError("width range must be positive and ordered")


@dataclass
class SynthPair:
    img_a: np.ndarray
    img_b: np.ndarray
    modality_a: Modality
    modality_b: Modality
    h_gt: Homography
    keypoints_a: np.ndarray     # (n, 2) bifurcations visible in both frames
    keypoints_b: np.ndarray     # h_gt(keypoints_a), same order
    control_a: np.ndarray       # (6, 2)
    control_b: np.ndarray


def random_homography(rng, size: int, mag: HomographyMagnitude = HomographyMagnitude()) -> Homography:
    """Seeded rotation/scale/translation/perspective about the image center."""
    theta = math.radians(rng.uniform(-mag.max_rotation_deg, mag.max_rotation_deg))
    s = rng.uniform(*mag.scale_range)
    tx, ty = rng.uniform(-mag.max_translation, mag.max_translation, size=2)
    px, py = rng.uniform(-mag.perspective_jitter, mag.perspective_jitter, size=2)
    c = (size - 1) / 2.0
    cos, sin = math.cos(theta) * s, math.sin(theta) * s
    rot = np.array([[cos, -sin, 0.0], [sin, cos, 0.0], [0.0, 0.0, 1.0]])
    persp = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [px, py, 1.0]])
    t_neg = np.array([[1.0, 0.0, -c], [0.0, 1.0, -c], [0.0, 0.0, 1.0]])
    t_pos = np.array([[1.0, 0.0, c + tx], [0.0, 1.0, c + ty], [0.0, 0.0, 1.0]])
    return Homography(t_pos @ rot @ persp @ t_neg)


def _grow_tree(rng, size: int, cfg: SynthConfig, segments: list, bifs: list) -> None:
    margin = 0.18 * size
    x0 = rng.uniform(margin, size - margin)
    y0 = rng.uniform(margin, size - margin)
    stack = [(x0, y0, rng.uniform(0.0, 2.0 * math.pi),
              rng.uniform(cfg.width_range[0], cfg.width_range[1]), 0)]
    step_len = max(5.0, size / 80.0)
    while stack:
        x, y, ang, width, depth = stack.pop()
        steps = 0
        while True:
            steps += 1
            ang += rng.uniform(-0.22, 0.22)
            nx = x + step_len * math.cos(ang)
            ny = y + step_len * math.sin(ang)
            segments.append((x, y, nx, ny, width))
            x, y = nx, ny
            width *= 0.985
            if not (-12.0 <= x <= size + 12.0 and -12.0 <= y <= size + 12.0):
                break
            if width < cfg.min_width or steps > 70:
                break
            if depth < cfg.max_depth and steps >= 4 and rng.random() < cfg.branch_prob:
                bifs.append((x, y))
                spread = rng.uniform(0.35, 0.8)
                stack.append((x, y, ang - spread, width * rng.uniform(0.7, 0.9), depth + 1))
                stack.append((x, y, ang + spread, width * rng.uniform(0.7, 0.9), depth + 1))
                break


def _render_segments(segments, size: int, contrast: float) -> np.ndarray:
    """Dark vessels on a light background via per-segment distance profiles."""
    dark = np.zeros((size, size))
    for x0, y0, x1, y1, w in segments:
        pad = 3.0 * w + 2.0
        xa = max(int(math.floor(min(x0, x1) - pad)), 0)
        xb = min(int(math.ceil(max(x0, x1) + pad)), size - 1)
        ya = max(int(math.floor(min(y0, y1) - pad)), 0)
        yb = min(int(math.ceil(max(y0, y1) + pad)), size - 1)
        if xa > xb or ya > yb:
            continue
        xs = np.arange(xa, xb + 1, dtype=np.float64)
        ys = np.arange(ya, yb + 1, dtype=np.float64)
        gx, gy = np.meshgrid(xs, ys)
        vx, vy = x1 - x0, y1 - y0
        denom = max(vx * vx + vy * vy, 1e-12)
        t = np.clip(((gx - x0) * vx + (gy - y0) * vy) / denom, 0.0, 1.0)
        dx = gx - (x0 + t * vx)
        dy = gy - (y0 + t * vy)
        prof = np.exp(-(dx * dx + dy * dy) / (w * w))
        region = dark[ya:yb + 1, xa:xb + 1]
        np.maximum(region, prof, out=region)
    return 1.0 - contrast * dark


def _local_scale(h: Homography, x: float, y: float) -> float:
    """sqrt(|det J|) of the homography's Jacobian at (x, y), analytic."""
    m = h.m
    w = m[2, 0] * x + m[2, 1] * y + m[2, 2]
    px = (m[0, 0] * x + m[0, 1] * y + m[0, 2]) / w
    py = (m[1, 0] * x + m[1, 1] * y + m[1, 2]) / w
    det = ((m[0, 0] - m[2, 0] * px) * (m[1, 1] - m[2, 1] * py)
           - (m[0, 1] - m[2, 1] * px) * (m[1, 0] - m[2, 0] * py)) / (w * w)
    return math.sqrt(max(abs(det), 1e-12))


def apply_modality_transform(img: np.ndarray, mt: ModalityTransform, rng) -> np.ndarray:
    """Gamma, blur, background gradient, noise, clip, optional inversion."""
    out = np.power(np.clip(img, 0.0, 1.0), mt.gamma)
    if mt.blur_sigma > 0:
        out = gaussian_blur(out, mt.blur_sigma)
    if mt.gradient_amplitude > 0:
        h, w = out.shape
        dx, dy = rng.uniform(-1.0, 1.0, size=2)
        xx = np.linspace(-0.5, 0.5, w)[None, :]
        yy = np.linspace(-0.5, 0.5, h)[:, None]
        out = out + mt.gradient_amplitude * (dx * xx + dy * yy)
    if mt.noise_sigma > 0:
        out = out + mt.noise_sigma * rng.standard_normal(out.shape)
    out = np.clip(out, 0.0, 1.0)
    if mt.invert:
        out = 1.0 - out
    return out


def _spread_subset(points: np.ndarray, k: int) -> np.ndarray:
    """Farthest-point sampling: indices of k well-spread points."""
    n = points.shape[0]
    centroid = points.mean(axis=0)
    first = int(np.argmax(((points - centroid) ** 2).sum(axis=1)))
    chosen = [first]
    dist = np.sqrt(((points - points[first]) ** 2).sum(axis=1))
    while len(chosen) < k:
        nxt = int(np.argmax(dist))
        chosen.append(nxt)
        dist = np.minimum(dist, np.sqrt(((points - points[nxt]) ** 2).sum(axis=1)))
    return np.asarray(chosen, np.int64)


def synth_generate(cfg: SynthConfig = SynthConfig()) -> SynthPair:
    """One synthetic multi-modal pair with exact ground truth.

    Image B renders the h_gt-warped vessel geometry at full resolution, so
    the pair shares no resampling artifacts.  Both sides apply their modality
    transform with identically seeded randomness: identical transform
    configs under an identity homography reproduce image A bit-exactly.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
    size = cfg.size
    h_gt = random_homography(rng, size, cfg.homography)

    margin = 14.0
    segments: list = []
    bifs: list = []
    for _ in range(cfg.n_trees):
        _grow_tree(rng, size, cfg, segments, bifs)

    def visible(points):
        if not points:
            return np.empty((0, 2)), np.empty((0, 2))
        pa = np.asarray(points, np.float64)
        pb = apply_homography(h_gt, pa)
        ok = ((pa[:, 0] >= margin) & (pa[:, 0] <= size - 1 - margin)
              & (pa[:, 1] >= margin) & (pa[:, 1] <= size - 1 - margin)
              & (pb[:, 0] >= margin) & (pb[:, 0] <= size - 1 - margin)
              & (pb[:, 1] >= margin) & (pb[:, 1] <= size - 1 - margin))
        return pa[ok], pb[ok]

    kp_a, kp_b = visible(bifs)
    extra = 0
    while kp_a.shape[0] < 12 and extra < 40:
        _grow_tree(rng, size, cfg, segments, bifs)
        extra += 1
        kp_a, kp_b = visible(bifs)
    if kp_a.shape[0] < 6:
        raise ConfigError("could not place 6 visible control points; widen the config")

    segments_b = []
    for x0, y0, x1, y1, w in segments:
        (xa, ya), (xb, yb) = apply_homography(
            h_gt, np.array([[x0, y0], [x1, y1]]))
        scale = _local_scale(h_gt, (x0 + x1) / 2.0, (y0 + y1) / 2.0)
        segments_b.append((xa, ya, xb, yb, w * scale))

    base_a = _render_segments(segments, size, cfg.contrast)
    base_b = _render_segments(segments_b, size, cfg.contrast)

    rng_a = np.random.default_rng(np.random.SeedSequence([cfg.seed, 77]))
    rng_b = np.random.default_rng(np.random.SeedSequence([cfg.seed, 77]))
    img_a = apply_modality_transform(base_a, cfg.side_a, rng_a)
    img_b = apply_modality_transform(base_b, cfg.side_b, rng_b)

    pick = _spread_subset(kp_a, 6)
    return SynthPair(
        img_a=img_a, img_b=img_b,
        modality_a=Modality(cfg.side_a.label), modality_b=Modality(cfg.side_b.label),
        h_gt=h_gt,
        keypoints_a=kp_a, keypoints_b=kp_b,
        control_a=kp_a[pick], control_b=kp_b[pick],
    )


# ---------------------------------------------------------------------------
# training pools

@dataclass
class PatchPool:
    patches: np.ndarray   # (n, 32, 32, 3)
    labels: np.ndarray    # (n,) int, 0 vessel / 1 background
    strata: dict          # (class, modality) -> sample indices


@dataclass
class PairPool:
    anchors: np.ndarray    # (n, 32, 32, 3)
    positives: np.ndarray  # (n, 32, 32, 3)


@dataclass
class ToyPatchDataset:
    det_train: PatchPool
    desc_train: PairPool
    det_val: PatchPool
    desc_val: PairPool


def _sample_background_centers(rng, shape, vessel_kps: np.ndarray, count: int,
                               min_dist: float = 16.0) -> np.ndarray:
    h, w = shape[:2]
    out = []
    attempts = 0
    while len(out) < count and attempts < 200 * max(count, 1):
        attempts += 1
        x = float(rng.integers(0, w))
        y = float(rng.integers(0, h))
        if vessel_kps.size:
            d = np.sqrt(((vessel_kps - (x, y)) ** 2).sum(axis=1)).min()
            if d <= min_dist:
                continue
        out.append((x, y))
    return np.asarray(out, np.float64).reshape(len(out), 2)


def build_training_pools(annotations, images, seed: int = 0):
    """Detector patch pool and positive-pair pool from linked annotations.

    annotations: list of AnnotationSet; images: mapping ann_id to the
    preprocessed HxWx3 image.  Every annotated keypoint contributes a patch;
    background patches are drawn per image (at least 16 px from any vessel
    keypoint) until the classes balance.  One positive pair is built per
    linked correspondence, each unordered image pair processed once.
    """
    rng = np.random.default_rng(seed)
    patches = []
    labels = []
    strata: dict = {}
    by_id = {ann.ann_id: ann for ann in annotations}

    for ann in annotations:
        img = images[ann.ann_id]
        vessel_kps = ann.keypoints[[c == "vessel" for c in ann.keypoint_classes]] \
            if len(ann.keypoint_classes) else np.empty((0, 2))
        n_bg_annotated = sum(c == "background" for c in ann.keypoint_classes)
        for (x, y), cls in zip(ann.keypoints, ann.keypoint_classes):
            idx = len(patches)
            patches.append(extract_patch(img, (x, y)))
            labels.append(0 if cls == "vessel" else 1)
            strata.setdefault((cls, ann.modality.value), []).append(idx)
        need = vessel_kps.shape[0] - n_bg_annotated
        if need > 0:
            for x, y in _sample_background_centers(rng, img.shape, vessel_kps, need):
                idx = len(patches)
                patches.append(extract_patch(img, (x, y)))
                labels.append(1)
                strata.setdefault(("background", ann.modality.value), []).append(idx)

    anchors = []
    positives = []
    seen = set()
    any_links = False
    for ann in annotations:
        for link in ann.links:
            any_links = True
            if link.other not in by_id:
                raise MissingLinkError(f"{ann.ann_id} links unknown image {link.other!r}")
            key = frozenset((ann.ann_id, link.other))
            if key in seen:
                continue
            seen.add(key)
            other = by_id[link.other]
            img_a = images[ann.ann_id]
            img_b = images[other.ann_id]
            for i, j in link.index_map:
                anchors.append(extract_patch(img_a, ann.keypoints[i]))
                positives.append(extract_patch(img_b, other.keypoints[j]))
    if not any_links:
        warnings.warn("annotations carry no pair links; descriptor pool is empty",
                      MissingLinkWarning)

    det = PatchPool(
        patches=np.asarray(patches).reshape(len(patches), PATCH, PATCH, 3),
        labels=np.asarray(labels, np.int64),
        strata={k: np.asarray(v, np.int64) for k, v in strata.items()},
    )
    pairs = PairPool(
        anchors=np.asarray(anchors).reshape(len(anchors), PATCH, PATCH, 3),
        positives=np.asarray(positives).reshape(len(positives), PATCH, PATCH, 3),
    )
    return det, pairs


def split_pools(det: PatchPool, pairs: PairPool, val_fraction: float = 0.2,
                seed: int = 0) -> ToyPatchDataset:
    """Deterministic train/validation split keeping every stratum non-empty."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 3]))

    val_mask = np.zeros(det.patches.shape[0], bool)
    for key in sorted(det.strata):
        ids = det.strata[key]
        n_val = max(1, int(round(val_fraction * ids.shape[0]))) if ids.shape[0] > 1 else 0
        pickv = rng.permutation(ids)[:n_val]
        val_mask[pickv] = True

    def subpool(mask):
        idx = np.nonzero(mask)[0]
        remap = {int(old): new for new, old in enumerate(idx)}
        strata = {}
        for key, ids in det.strata.items():
            kept = [remap[int(i)] for i in ids if mask[i]]
            if kept:
                strata[key] = np.asarray(kept, np.int64)
        return PatchPool(det.patches[idx], det.labels[idx], strata)

    n_pairs = pairs.anchors.shape[0]
    n_val_pairs = max(1, int(round(val_fraction * n_pairs))) if n_pairs > 1 else 0
    val_pair_ids = rng.permutation(n_pairs)[:n_val_pairs]
    pair_mask = np.zeros(n_pairs, bool)
    pair_mask[val_pair_ids] = True

    return ToyPatchDataset(
        det_train=subpool(~val_mask),
        desc_train=PairPool(pairs.anchors[~pair_mask], pairs.positives[~pair_mask]),
        det_val=subpool(val_mask),
        desc_val=PairPool(pairs.anchors[pair_mask], pairs.positives[pair_mask]),
    )


def make_toy_patch_dataset(seed: int = 0, n_scenes: int = 6, size: int = 320,
                           noise_sigma: float = 0.008) -> tuple:
    """Seeded patch dataset over 2 classes x 3 pseudo-modalities.

    Each scene is one vessel tree rendered under three gentle appearance
    transforms (aligned pixel-for-pixel), giving positive pairs across
    pseudo-modalities at each bifurcation plus balanced background patches.
    Returns (ToyPatchDataset, held_out PairPool) where the held-out pairs
    come from scenes absent from training and validation.
    """
    transforms = (
        ModalityTransform(label="SYNTH_A", gamma=1.0, noise_sigma=noise_sigma),
        ModalityTransform(label="SYNTH_B", gamma=0.75, noise_sigma=noise_sigma,
                          gradient_amplitude=0.06),
        ModalityTransform(label="CF", gamma=1.3, blur_sigma=0.6, noise_sigma=noise_sigma),
    )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 5]))
    patches = []
    labels = []
    strata: dict = {}
    anchors = []
    positives = []
    held_anchors = []
    held_positives = []
    held_scene = n_scenes - 1

    for scene in range(n_scenes):
        cfg = SynthConfig(size=size, seed=int(rng.integers(0, 2 ** 31)), n_trees=2,
                          homography=HomographyMagnitude(max_rotation_deg=0.0,
                                                         scale_range=(1.0, 1.0),
                                                         max_translation=0.0,
                                                         perspective_jitter=0.0))
        scene_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 11]))
        segments: list = []
        bifs: list = []
        for _ in range(cfg.n_trees):
            _grow_tree(scene_rng, size, cfg, segments, bifs)

        def in_frame(raw):
            pts = np.asarray(raw, np.float64).reshape(len(raw), 2)
            if not pts.size:
                return pts
            keep = ((pts[:, 0] >= 20) & (pts[:, 0] <= size - 21)
                    & (pts[:, 1] >= 20) & (pts[:, 1] <= size - 21))
            return pts[keep]

        pts = in_frame(bifs)
        extra = 0
        while pts.shape[0] < 4 and extra < 30:
            _grow_tree(scene_rng, size, cfg, segments, bifs)
            extra += 1
            pts = in_frame(bifs)
        base = _render_segments(segments, size, cfg.contrast)
        if pts.shape[0] == 0:
            continue

        renders = []
        for mi, mt in enumerate(transforms):
            mt_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 77, mi]))
            img = apply_modality_transform(base, mt, mt_rng)
            renders.append(preprocess_image(img, Modality(mt.label)))

        if scene != held_scene:
            bg = _sample_background_centers(scene_rng, (size, size), pts, pts.shape[0])
            for mi, img in enumerate(renders):
                tag = transforms[mi].label
                for x, y in pts:
                    idx = len(patches)
                    patches.append(extract_patch(img, (x, y)))
                    labels.append(0)
                    strata.setdefault(("vessel", tag), []).append(idx)
                for x, y in bg:
                    idx = len(patches)
                    patches.append(extract_patch(img, (x, y)))
                    labels.append(1)
                    strata.setdefault(("background", tag), []).append(idx)

        # one pair per location: duplicated locations across combos would make
        # every hard negative a same-location alias and cap the loss at 2m
        combos = [(0, 1), (0, 2), (1, 2)]
        pair_sink = (held_anchors, held_positives) if scene == held_scene else (anchors, positives)
        for k, (x, y) in enumerate(pts):
            mi, mj = combos[k % 3]
            pair_sink[0].append(extract_patch(renders[mi], (x, y)))
            pair_sink[1].append(extract_patch(renders[mj], (x, y)))

    det = PatchPool(
        patches=np.asarray(patches).reshape(len(patches), PATCH, PATCH, 3),
        labels=np.asarray(labels, np.int64),
        strata={k: np.asarray(v, np.int64) for k, v in strata.items()},
    )
    pairs = PairPool(np.asarray(anchors).reshape(len(anchors), PATCH, PATCH, 3),
                     np.asarray(positives).reshape(len(positives), PATCH, PATCH, 3))
    held = PairPool(np.asarray(held_anchors).reshape(len(held_anchors), PATCH, PATCH, 3),
                    np.asarray(held_positives).reshape(len(held_positives), PATCH, PATCH, 3))
    return split_pools(det, pairs, seed=seed), held
