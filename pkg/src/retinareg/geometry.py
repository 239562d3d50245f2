"""Projective geometry: homographies, DLT estimation, transfer errors.

Points are float64 arrays of shape (n, 2), pixel coordinates with the origin
at the top-left pixel center.  Homographies map source to target coordinates
and are stored in a canonical scaling so equal transforms compare equal.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import (
    DegenerateConfigurationError,
    DegenerateHomographyError,
    DegeneratePointError,
    InsufficientPointsError,
    WrongCountError,
)

_W_EPS = 1e-12


def as_points(pts) -> np.ndarray:
    """Validate and convert to an (n, 2) float64 array of finite points."""
    arr = np.asarray(pts, np.float64)
    if arr.ndim == 1 and arr.size == 2:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"expected points of shape (n, 2), got {arr.shape}")
    if arr.size and not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr


class Homography:
    """A 3x3 projective transform in canonical scaling.

    Canonical form: h[2,2] = 1 whenever h[2,2] is not numerically zero,
    otherwise Frobenius norm 1 with the largest-magnitude entry positive.
    Construction rejects non-invertible matrices.
    """

    __slots__ = ("m",)

    def __init__(self, m):
        m = np.asarray(m, np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise DegenerateHomographyError("homography has non-finite entries")
        fro = float(np.linalg.norm(m))
        if fro == 0.0:
            raise DegenerateHomographyError("zero matrix")
        if abs(m[2, 2]) > _W_EPS * fro:
            m = m / m[2, 2]
        else:
            m = m / fro
            flat = np.abs(m).argmax()
            if m.flat[flat] < 0:
                m = -m
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateHomographyError("homography is not invertible")
        self.m = m
        self.m.setflags(write=False)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self after other: (self @ other)(p) = self(other(p))."""
        return Homography(self.m @ other.m)

    def almost_equal(self, other: "Homography", tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.m - other.m) <= tol))

    def __repr__(self):
        return f"Homography({self.m.tolist()})"

    # -- text interchange: 3 lines x 3 floats, row-major ------------------

    def to_text(self) -> str:
        return "\n".join(" ".join(f"{v:.17g}" for v in row) for row in self.m) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "Homography":
        vals = [float(tok) for tok in text.split()]
        if len(vals) != 9:
            raise ValueError(f"homography text must hold 9 numbers, got {len(vals)}")
        return cls(np.array(vals).reshape(3, 3))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_text())

    @classmethod
    def load(cls, path) -> "Homography":
        with open(path) as fh:
            return cls.from_text(fh.read())


def apply_homography(h: Homography, pts) -> np.ndarray:
    """Project points through h with perspective division, order preserved."""
    pts = as_points(pts)
    if pts.shape[0] == 0:
        return pts.copy()
    m = h.m
    w = m[2, 0] * pts[:, 0] + m[2, 1] * pts[:, 1] + m[2, 2]
    bad = np.abs(w) < _W_EPS
    if np.any(bad):
        i = int(np.argmax(bad))
        raise DegeneratePointError(f"point {tuple(pts[i])} maps to infinity")
    x = (m[0, 0] * pts[:, 0] + m[0, 1] * pts[:, 1] + m[0, 2]) / w
    y = (m[1, 0] * pts[:, 0] + m[1, 1] * pts[:, 1] + m[1, 2]) / w
    return np.stack([x, y], axis=1)


def _hartley_normalization(pts: np.ndarray) -> np.ndarray:
    """Similarity T mapping the centroid to the origin, mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    d = np.sqrt(((pts - centroid) ** 2).sum(axis=1))
    mean_dist = d.mean()
    if mean_dist < 1e-12:
        raise DegenerateConfigurationError("correspondences collapse to a single point")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def estimate_homography_dlt(src, dst) -> Homography:
    """Least-squares homography via the normalized direct linear transform.

    Exactly determined for 4 correspondences, algebraic least squares for
    more.  Both point sets are Hartley-normalized, the 2n x 9 system is
    solved by SVD, and the result is denormalized and canonically scaled.

    Raises
    ------
    InsufficientPointsError
        Fewer than 4 correspondences.
    DegenerateConfigurationError
        Collapsed normalization or an ambiguous null space (the two
        smallest singular values within 0.1 percent, or rank below 8).
    """
    src = as_points(src)
    dst = as_points(dst)
    if src.shape[0] != dst.shape[0]:
        raise ValueError("source and target counts differ")
    n = src.shape[0]
    if n < 4:
        raise InsufficientPointsError(f"need at least 4 correspondences, got {n}")

    t_src = _hartley_normalization(src)
    t_dst = _hartley_normalization(dst)
    sn = (src @ t_src[:2, :2].T) + t_src[:2, 2]
    dn = (dst @ t_dst[:2, :2].T) + t_dst[:2, 2]

    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    a[0::2, 0] = x
    a[0::2, 1] = y
    a[0::2, 2] = 1.0
    a[0::2, 6] = -u * x
    a[0::2, 7] = -u * y
    a[0::2, 8] = -u
    a[1::2, 3] = x
    a[1::2, 4] = y
    a[1::2, 5] = 1.0
    a[1::2, 6] = -v * x
    a[1::2, 7] = -v * y
    a[1::2, 8] = -v

    _, s, vt = np.linalg.svd(a)
    # for 4 points the 8x9 system leaves the ninth singular value implicit at 0
    s_second = s[7]
    s_small = s[8] if s.shape[0] > 8 else 0.0
    if s_second <= 1e-12 * s[0] or s_small > 0.999 * s_second:
        raise DegenerateConfigurationError("correspondences do not determine a unique homography")
    hn = vt[8].reshape(3, 3)
    h = np.linalg.inv(t_dst) @ hn @ t_src
    try:
        return Homography(h)
    except DegenerateHomographyError as exc:
        raise DegenerateConfigurationError(str(exc)) from exc


def ground_truth_homography(control_src, control_dst) -> Homography:
    """Ground-truth homography from the 6 annotated control points."""
    src = as_points(control_src)
    dst = as_points(control_dst)
    if src.shape[0] != 6 or dst.shape[0] != 6:
        raise WrongCountError(f"expected exactly 6 control points, got {src.shape[0]}/{dst.shape[0]}")
    return estimate_homography_dlt(src, dst)


def corner_transfer_error(h_a: Homography, h_b: Homography, width: int, height: int) -> float:
    """Mean distance between the 4 image corners mapped by h_a vs h_b."""
    corners = np.array([[0.0, 0.0],
                        [width - 1.0, 0.0],
                        [width - 1.0, height - 1.0],
                        [0.0, height - 1.0]])
    pa = apply_homography(h_a, corners)
    pb = apply_homography(h_b, corners)
    return float(np.sqrt(((pa - pb) ** 2).sum(axis=1)).mean())


def reprojection_errors(h: Homography, src, dst) -> np.ndarray:
    """||h(src_i) - dst_i|| per correspondence, +inf for degenerate points."""
    src = as_points(src)
    dst = as_points(dst)
    if src.shape[0] != dst.shape[0]:
        raise ValueError("source and target counts differ")
    if src.shape[0] == 0:
        return np.empty(0)
    return kernels.projection_errors(h.m.ravel(), src, dst)
