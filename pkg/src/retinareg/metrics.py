"""Evaluation metrics: control-point errors, success rates, repeatability,
matching inlier ratio, and the dataset-level report."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyInputError, InvalidCountsError
from .geometry import Homography, apply_homography, as_points, reprojection_errors


def euclidean_errors(h_pred: Optional[Homography], control_src, control_dst) -> np.ndarray:
    """Per-control-point ||H_pred(p) - q||; all +inf when registration failed."""
    src = as_points(control_src)
    dst = as_points(control_dst)
    if src.shape[0] == 0 or src.shape[0] != dst.shape[0]:
        raise ValueError("control points empty or misaligned")
    if h_pred is None:
        return np.full(src.shape[0], np.inf)
    return reprojection_errors(h_pred, src, dst)


def _success_rate(per_pair_errors, eps: float, reducer) -> float:
    per_pair_errors = list(per_pair_errors)
    if not per_pair_errors:
        raise EmptyInputError("success rate over zero pairs")
    hits = 0
    for errors in per_pair_errors:
        errors = np.asarray(errors, np.float64)
        value = reducer(errors)
        if np.isfinite(value) and value <= eps:
            hits += 1
    return 100.0 * hits / len(per_pair_errors)


def success_rate_me(per_pair_errors, eps: float) -> float:
    """Percentage of pairs whose mean control-point error is within eps."""
    return _success_rate(per_pair_errors, eps, np.mean)


def success_rate_mae(per_pair_errors, eps: float) -> float:
    """Percentage of pairs whose maximum control-point error is within eps."""
    return _success_rate(per_pair_errors, eps, np.max)


def _inside(pts: np.ndarray, width: int, height: int) -> np.ndarray:
    return ((pts[:, 0] >= 0) & (pts[:, 0] < width)
            & (pts[:, 1] >= 0) & (pts[:, 1] < height))


def repeatability(kps_a, kps_b, h_gt: Homography, eps: float,
                  dims_a, dims_b) -> float:
    """Symmetric detector repeatability under the ground-truth warp.

    Keypoints of A are projected by h_gt and kept when landing inside image
    B; keypoints of B are projected by the inverse and kept inside image A.
    Each side counts kept points whose nearest kept counterpart in the target
    frame lies within eps.  dims are (width, height).
    """
    kps_a = as_points(kps_a) if np.size(kps_a) else np.empty((0, 2))
    kps_b = as_points(kps_b) if np.size(kps_b) else np.empty((0, 2))
    wa, ha = dims_a
    wb, hb = dims_b

    proj_a = apply_homography(h_gt, kps_a) if kps_a.shape[0] else np.empty((0, 2))
    proj_b = apply_homography(h_gt.inverse(), kps_b) if kps_b.shape[0] else np.empty((0, 2))
    keep_a = _inside(proj_a, wb, hb)
    keep_b = _inside(proj_b, wa, ha)

    a_in_b = proj_a[keep_a]          # A keypoints expressed in B coordinates
    b_kept = kps_b[keep_b]           # B keypoints that share the viewport
    b_in_a = proj_b[keep_b]
    a_kept = kps_a[keep_a]

    total = a_in_b.shape[0] + b_kept.shape[0]
    if total == 0:
        return 0.0

    count = 0
    if a_in_b.shape[0] and b_kept.shape[0]:
        count += int((_min_dists(a_in_b, b_kept) <= eps).sum())
        count += int((_min_dists(b_in_a, a_kept) <= eps).sum())
    return count / total


def _min_dists(query: np.ndarray, targets: np.ndarray, chunk: int = 1024) -> np.ndarray:
    """Distance from each query point to its nearest target, chunked."""
    t_sq = (targets * targets).sum(axis=1)
    out = np.empty(query.shape[0])
    for lo in range(0, query.shape[0], chunk):
        q = query[lo:lo + chunk]
        sq = (q * q).sum(axis=1)[:, None] - 2.0 * (q @ targets.T) + t_sq[None, :]
        out[lo:lo + chunk] = np.sqrt(np.maximum(sq.min(axis=1), 0.0))
    return out


def matching_inlier_ratio(num_inliers: int, num_matches: int) -> float:
    """RANSAC inliers over detected matches; 0 when nothing matched."""
    if num_inliers > num_matches:
        raise InvalidCountsError(f"{num_inliers} inliers exceed {num_matches} matches")
    if num_inliers < 0 or num_matches < 0:
        raise InvalidCountsError("counts must be non-negative")
    if num_matches == 0:
        return 0.0
    return num_inliers / num_matches


# ---------------------------------------------------------------------------
# dataset-level report

@dataclass
class PairRecord:
    pair_id: str
    modality_pair: str
    mean_error: float
    max_error: float
    rep: float
    mir: float
    status: str

    def to_dict(self) -> dict:
        def num(v):
            return v if np.isfinite(v) else None
        return {
            "pair_id": self.pair_id,
            "modality_pair": self.modality_pair,
            "mean_error": num(self.mean_error),
            "max_error": num(self.max_error),
            "rep": self.rep,
            "mir": self.mir,
            "status": self.status,
        }


@dataclass
class EvalReport:
    thresholds: dict
    pairs: list = field(default_factory=list)            # [PairRecord]
    aggregates: dict = field(default_factory=dict)       # group -> metrics dict

    def to_dict(self) -> dict:
        return {
            "thresholds": dict(self.thresholds),
            "pairs": [p.to_dict() for p in self.pairs],
            "aggregates": self.aggregates,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_table(self) -> str:
        """Aligned text table of the aggregates, one decimal, percentages."""
        header = f"{'group':<16}{'N':>4}  {'SR_ME':>6}  {'SR_MAE':>6}  {'Rep':>6}  {'MIR':>6}"
        lines = [header, "-" * len(header)]
        for group in sorted(self.aggregates):
            agg = self.aggregates[group]
            lines.append(
                f"{group:<16}{agg['n_pairs']:>4}  "
                f"{agg['sr_me']:>6.1f}  {agg['sr_mae']:>6.1f}  "
                f"{100.0 * agg['mean_rep']:>6.1f}  {100.0 * agg['mean_mir']:>6.1f}")
        eps = (f"SR_ME eps={self.thresholds['sr_me']}  SR_MAE eps={self.thresholds['sr_mae']}  "
               f"Rep eps={self.thresholds['rep']}  (Rep/MIR as percentages)")
        return "\n".join([eps] + lines) + "\n"


def evaluate_records(records, errors_by_pair, thresholds) -> EvalReport:
    """Aggregate per-pair records per modality pair and overall.

    records: list of PairRecord; errors_by_pair: matching list of per-pair
    control-point error arrays (used for the success rates so aggregates stay
    recomputable from raw errors).
    """
    report = EvalReport(thresholds=dict(thresholds))
    report.pairs = list(records)
    groups = {"overall": list(range(len(records)))}
    for i, rec in enumerate(records):
        groups.setdefault(rec.modality_pair, []).append(i)
    for name, idxs in groups.items():
        errs = [errors_by_pair[i] for i in idxs]
        report.aggregates[name] = {
            "n_pairs": len(idxs),
            "sr_me": success_rate_me(errs, thresholds["sr_me"]),
            "sr_mae": success_rate_mae(errs, thresholds["sr_mae"]),
            "mean_rep": float(np.mean([records[i].rep for i in idxs])),
            "mean_mir": float(np.mean([records[i].mir for i in idxs])),
        }
    return report
