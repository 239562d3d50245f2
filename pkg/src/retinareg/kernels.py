"""Hot numeric kernels, each in a numba ``@njit`` build and a pure-numpy build.

Dispatchers (``bicubic_upsample``, ``greedy_nms``, ``bilinear_grid_sample``,
``orientation_histograms``, ``projection_errors``) pick the build from
:mod:`retinareg.accel`.  Both builds of a kernel evaluate the same arithmetic
expression per element, so the integer-logic kernels (NMS) agree exactly and
the float kernels agree bit-for-bit except the histogram accumulator, whose
summation order differs between builds.

``benchmarks/bench_kernels.py`` times the two builds against each other.
"""

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import accel
from .errors import BadFactorError, DimensionMismatchError


# ---------------------------------------------------------------------------
# bicubic upsampling (Catmull-Rom, a = -0.5)

def _bicubic_taps(n_in: int, factor: int, n_out: int):
    """Tap indices and weights for one separable Catmull-Rom pass.

    Output sample x reads source coordinate (x + 0.5)/factor - 0.5; the four
    taps are clamped to the grid (edge replication).  Weight w1 is implicit:
    the pass computes g1 + w0*(g0-g1) + w2*(g2-g1) + w3*(g3-g1), which
    preserves constants exactly because the weights sum to one in real
    arithmetic and the differences vanish on constant input.
    """
    x = np.arange(n_out, dtype=np.float64)
    g = (x + 0.5) / factor - 0.5
    i1 = np.floor(g)
    t = g - i1
    base = i1.astype(np.int64)
    idx = np.stack([base - 1, base, base + 1, base + 2])
    np.clip(idx, 0, n_in - 1, out=idx)
    w0 = ((-0.5 * t + 1.0) * t - 0.5) * t
    w2 = ((-1.5 * t + 2.0) * t + 0.5) * t
    w3 = (0.5 * t - 0.5) * t * t
    return idx, w0, w2, w3


def _bicubic_pass_numpy(src, idx, w0, w2, w3):
    g0 = src[:, idx[0]]
    g1 = src[:, idx[1]]
    g2 = src[:, idx[2]]
    g3 = src[:, idx[3]]
    return g1 + (w0 * (g0 - g1) + w2 * (g2 - g1) + w3 * (g3 - g1))


def _bicubic_pass_loop(src, idx, w0, w2, w3):
    rows = src.shape[0]
    n_out = idx.shape[1]
    out = np.empty((rows, n_out), np.float64)
    for r in range(rows):
        for x in range(n_out):
            g0 = src[r, idx[0, x]]
            g1 = src[r, idx[1, x]]
            g2 = src[r, idx[2, x]]
            g3 = src[r, idx[3, x]]
            out[r, x] = g1 + (w0[x] * (g0 - g1) + w2[x] * (g2 - g1) + w3[x] * (g3 - g1))
    return out


def bicubic_upsample_numpy(grid, factor, out_h, out_w):
    grid = np.ascontiguousarray(grid, np.float64)
    hidx, hw0, hw2, hw3 = _bicubic_taps(grid.shape[1], factor, out_w)
    vidx, vw0, vw2, vw3 = _bicubic_taps(grid.shape[0], factor, out_h)
    tmp = _bicubic_pass_numpy(grid, hidx, hw0, hw2, hw3)
    out = _bicubic_pass_numpy(np.ascontiguousarray(tmp.T), vidx, vw0, vw2, vw3)
    return np.ascontiguousarray(out.T)


def bicubic_upsample_numba(grid, factor, out_h, out_w):
    grid = np.ascontiguousarray(grid, np.float64)
    hidx, hw0, hw2, hw3 = _bicubic_taps(grid.shape[1], factor, out_w)
    vidx, vw0, vw2, vw3 = _bicubic_taps(grid.shape[0], factor, out_h)
    tmp = _bicubic_pass_jit(grid, hidx, hw0, hw2, hw3)
    out = _bicubic_pass_jit(np.ascontiguousarray(tmp.T), vidx, vw0, vw2, vw3)
    return np.ascontiguousarray(out.T)


def bicubic_upsample(grid, factor, out_h, out_w):
    """Upsample a 2-D grid by an integer factor and crop to (out_h, out_w)."""
    if int(factor) != factor or factor < 1:
        raise BadFactorError(f"upsampling factor must be an integer >= 1, got {factor}")
    factor = int(factor)
    grid = np.asarray(grid)
    if grid.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D grid, got shape {grid.shape}")
    if out_h < 1 or out_w < 1 or out_h > grid.shape[0] * factor or out_w > grid.shape[1] * factor:
        raise DimensionMismatchError(
            f"output {out_w}x{out_h} incompatible with grid {grid.shape[1]}x{grid.shape[0]} at factor {factor}"
        )
    if accel.enabled():
        return bicubic_upsample_numba(grid, factor, out_h, out_w)
    return bicubic_upsample_numpy(grid, factor, out_h, out_w)


# ---------------------------------------------------------------------------
# greedy non-maximum suppression
#
# Candidates arrive already sorted in greedy order (confidence descending,
# ties by row-major index).  A candidate is kept iff no previously kept pixel
# lies within Euclidean distance <= radius; keeping a pixel suppresses the
# whole closed disk around it, which encodes exactly that rule.

def _greedy_nms_core(ys, xs, h, w, radius, max_keep):
    r = int(math.ceil(radius))
    r2 = radius * radius
    suppressed = np.zeros((h, w), np.bool_)
    keep = np.empty(ys.shape[0], np.int64)
    nk = 0
    for c in range(ys.shape[0]):
        y = ys[c]
        x = xs[c]
        if suppressed[y, x]:
            continue
        keep[nk] = c
        nk += 1
        if max_keep >= 0 and nk >= max_keep:
            break
        y0 = max(y - r, 0)
        y1 = min(y + r, h - 1)
        x0 = max(x - r, 0)
        x1 = min(x + r, w - 1)
        for yy in range(y0, y1 + 1):
            dy = yy - y
            for xx in range(x0, x1 + 1):
                dx = xx - x
                if dx * dx + dy * dy <= r2:
                    suppressed[yy, xx] = True
    return keep[:nk]


def greedy_nms_numpy(ys, xs, h, w, radius, max_keep=-1):
    r = int(math.ceil(radius))
    oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
    disk = (ox * ox + oy * oy) <= radius * radius
    suppressed = np.zeros((h, w), bool)
    keep = []
    for c in range(ys.shape[0]):
        y = int(ys[c])
        x = int(xs[c])
        if suppressed[y, x]:
            continue
        keep.append(c)
        if 0 <= max_keep <= len(keep):
            break
        y0 = max(y - r, 0)
        y1 = min(y + r, h - 1)
        x0 = max(x - r, 0)
        x1 = min(x + r, w - 1)
        suppressed[y0:y1 + 1, x0:x1 + 1] |= disk[y0 - y + r:y1 - y + r + 1,
                                                 x0 - x + r:x1 - x + r + 1]
    return np.asarray(keep, np.int64)


def greedy_nms_numba(ys, xs, h, w, radius, max_keep=-1):
    return _greedy_nms_jit(ys, xs, h, w, float(radius), max_keep)


def greedy_nms(ys, xs, h, w, radius, max_keep=-1):
    """Indices (into the candidate arrays) of the greedily accepted pixels."""
    ys = np.ascontiguousarray(ys, np.int64)
    xs = np.ascontiguousarray(xs, np.int64)
    if accel.enabled():
        return greedy_nms_numba(ys, xs, h, w, radius, max_keep)
    return greedy_nms_numpy(ys, xs, h, w, radius, max_keep)


# ---------------------------------------------------------------------------
# bilinear sampling of a (gh, gw, d) grid at continuous grid coordinates

def _bilinear_core(grid, gx, gy, out):
    gh, gw, d = grid.shape
    for i in range(gx.shape[0]):
        x = gx[i]
        y = gy[i]
        if x < 0.0:
            x = 0.0
        if x > gw - 1.0:
            x = gw - 1.0
        if y < 0.0:
            y = 0.0
        if y > gh - 1.0:
            y = gh - 1.0
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        if x0 > gw - 2:
            x0 = max(gw - 2, 0)
        if y0 > gh - 2:
            y0 = max(gh - 2, 0)
        tx = x - x0
        ty = y - y0
        x1 = min(x0 + 1, gw - 1)
        y1 = min(y0 + 1, gh - 1)
        for k in range(d):
            v00 = grid[y0, x0, k]
            v01 = grid[y0, x1, k]
            v10 = grid[y1, x0, k]
            v11 = grid[y1, x1, k]
            out[i, k] = (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11)
    return out


def bilinear_grid_sample_numpy(grid, gx, gy):
    gh, gw, _ = grid.shape
    x = np.clip(gx, 0.0, gw - 1.0)
    y = np.clip(gy, 0.0, gh - 1.0)
    x0 = np.minimum(np.floor(x).astype(np.int64), max(gw - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.int64), max(gh - 2, 0))
    tx = (x - x0)[:, None]
    ty = (y - y0)[:, None]
    x1 = np.minimum(x0 + 1, gw - 1)
    y1 = np.minimum(y0 + 1, gh - 1)
    v00 = grid[y0, x0]
    v01 = grid[y0, x1]
    v10 = grid[y1, x0]
    v11 = grid[y1, x1]
    return (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11)


def bilinear_grid_sample_numba(grid, gx, gy):
    out = np.empty((gx.shape[0], grid.shape[2]), np.float64)
    return _bilinear_jit(grid, gx, gy, out)


def bilinear_grid_sample(grid, gx, gy):
    """Sample a (gh, gw, d) grid at grid coordinates, clamped at the edges."""
    grid = np.ascontiguousarray(grid, np.float64)
    gx = np.ascontiguousarray(gx, np.float64)
    gy = np.ascontiguousarray(gy, np.float64)
    if accel.enabled():
        return bilinear_grid_sample_numba(grid, gx, gy)
    return bilinear_grid_sample_numpy(grid, gx, gy)


def bilinear_sample_map(img, xs, ys):
    """2-D convenience wrapper around :func:`bilinear_grid_sample`."""
    img = np.ascontiguousarray(img, np.float64)
    return bilinear_grid_sample(img[:, :, None], xs, ys)[:, 0]


# ---------------------------------------------------------------------------
# gradient-orientation histograms over strided windows
#
# Inputs are padded per-pixel arrays so that the window of cell (i, j) starts
# at padded pixel (i*stride, j*stride).  Each pixel contributes its magnitude
# split across two adjacent orientation bins (b0/m0, b1/m1) into the spatial
# bin of its in-window position.

def _hist_core(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori, out):
    bs = win // sb
    for ci in range(gh):
        for cj in range(gw):
            br = ci * stride
            bc = cj * stride
            for wy in range(win):
                sy = wy // bs
                r = br + wy
                for wx in range(win):
                    sx = wx // bs
                    c = bc + wx
                    o = (sy * sb + sx) * n_ori
                    out[ci, cj, o + b0[r, c]] += m0[r, c]
                    out[ci, cj, o + b1[r, c]] += m1[r, c]
    return out


def orientation_histograms_numpy(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori):
    nbins = sb * sb * n_ori
    bs = win // sb
    wy, wx = np.mgrid[0:win, 0:win]
    sbin_off = (((wy // bs) * sb + (wx // bs)) * n_ori).astype(np.int64)  # (win, win)

    vb0 = sliding_window_view(b0, (win, win))[::stride, ::stride]
    vb1 = sliding_window_view(b1, (win, win))[::stride, ::stride]
    vm0 = sliding_window_view(m0, (win, win))[::stride, ::stride]
    vm1 = sliding_window_view(m1, (win, win))[::stride, ::stride]

    out = np.empty((gh, gw, nbins), np.float64)
    chunk = max(1, (1 << 20) // max(1, gw * win * win))
    for r0 in range(0, gh, chunk):
        r1 = min(r0 + chunk, gh)
        ncell = (r1 - r0) * gw
        cellbase = (np.arange(ncell, dtype=np.int64) * nbins).reshape(r1 - r0, gw, 1, 1)
        idx0 = (cellbase + sbin_off + vb0[r0:r1, :gw]).ravel()
        idx1 = (cellbase + sbin_off + vb1[r0:r1, :gw]).ravel()
        acc = np.bincount(idx0, weights=vm0[r0:r1, :gw].ravel(), minlength=ncell * nbins)
        acc += np.bincount(idx1, weights=vm1[r0:r1, :gw].ravel(), minlength=ncell * nbins)
        out[r0:r1] = acc.reshape(r1 - r0, gw, nbins)
    return out


def orientation_histograms_numba(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori):
    out = np.zeros((gh, gw, sb * sb * n_ori), np.float64)
    return _hist_jit(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori, out)


def orientation_histograms(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori):
    b0 = np.ascontiguousarray(b0, np.int64)
    b1 = np.ascontiguousarray(b1, np.int64)
    m0 = np.ascontiguousarray(m0, np.float64)
    m1 = np.ascontiguousarray(m1, np.float64)
    if accel.enabled():
        return orientation_histograms_numba(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori)
    return orientation_histograms_numpy(b0, b1, m0, m1, gh, gw, stride, win, sb, n_ori)


# ---------------------------------------------------------------------------
# homography reprojection errors

def _proj_err_core(h, src, dst, out):
    for i in range(src.shape[0]):
        x = src[i, 0]
        y = src[i, 1]
        w = h[6] * x + h[7] * y + h[8]
        if abs(w) < 1e-12:
            out[i] = np.inf
        else:
            px = (h[0] * x + h[1] * y + h[2]) / w
            py = (h[3] * x + h[4] * y + h[5]) / w
            dx = px - dst[i, 0]
            dy = py - dst[i, 1]
            out[i] = math.sqrt(dx * dx + dy * dy)
    return out


def projection_errors_numpy(h, src, dst):
    x = src[:, 0]
    y = src[:, 1]
    w = h[6] * x + h[7] * y + h[8]
    with np.errstate(divide="ignore", invalid="ignore"):
        px = (h[0] * x + h[1] * y + h[2]) / w
        py = (h[3] * x + h[4] * y + h[5]) / w
        dx = px - dst[:, 0]
        dy = py - dst[:, 1]
        out = np.sqrt(dx * dx + dy * dy)
    out[np.abs(w) < 1e-12] = np.inf
    return out


def projection_errors_numba(h, src, dst):
    out = np.empty(src.shape[0], np.float64)
    return _proj_err_jit(h, src, dst, out)


def projection_errors(h, src, dst):
    """Per-point ||H(src) - dst||, +inf where the point maps to infinity."""
    h = np.ascontiguousarray(h, np.float64).reshape(9)
    src = np.ascontiguousarray(src, np.float64)
    dst = np.ascontiguousarray(dst, np.float64)
    if accel.enabled():
        return projection_errors_numba(h, src, dst)
    return projection_errors_numpy(h, src, dst)


# ---------------------------------------------------------------------------

if accel.HAVE_NUMBA:
    _bicubic_pass_jit = accel.njit(_bicubic_pass_loop)
    _greedy_nms_jit = accel.njit(_greedy_nms_core)
    _bilinear_jit = accel.njit(_bilinear_core)
    _hist_jit = accel.njit(_hist_core)
    _proj_err_jit = accel.njit(_proj_err_core)


def warmup():
    """Compile every numba kernel on tiny inputs (no-op without numba)."""
    if not accel.HAVE_NUMBA:
        return
    g = np.zeros((4, 4), np.float64)
    bicubic_upsample_numba(g, 2, 8, 8)
    greedy_nms_numba(np.zeros(1, np.int64), np.zeros(1, np.int64), 4, 4, 2.0)
    bilinear_grid_sample_numba(np.zeros((4, 4, 2), np.float64),
                               np.zeros(1, np.float64), np.zeros(1, np.float64))
    orientation_histograms_numba(np.zeros((8, 8), np.int64), np.zeros((8, 8), np.int64),
                                 np.zeros((8, 8), np.float64), np.zeros((8, 8), np.float64),
                                 1, 1, 4, 4, 2, 4)
    projection_errors_numba(np.eye(3).ravel(), np.zeros((1, 2)), np.zeros((1, 2)))
