"""Motion-quality metrics: framewise angle distance, DTW, minimum DTW, MMD, prediction error.

All metrics ignore the root joint: its translation and rotation channels are
dropped before any distance is taken.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .bvh_io import Motion, Skeleton, wrap_angle


def _nonroot_angles(skeleton: Skeleton, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    skeleton.check_pose_width(x.shape[-1])
    return x[..., skeleton.nonroot_rotation_indices()]


def frame_distance(a, b, skeleton: Skeleton) -> float:
    """Euclidean distance between non-root Euler angles (radians), wrapped per channel."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("pose dimensions differ")
    d = wrap_angle(_nonroot_angles(skeleton, a) - _nonroot_angles(skeleton, b))
    return float(np.sqrt(np.sum(d * d)))


def distance_matrix(a: Motion, b: Motion, skeleton: Skeleton) -> np.ndarray:
    """Local cost table: entry (i, j) is frame_distance(a_i, b_j)."""
    A = _nonroot_angles(skeleton, a.frames)
    B = _nonroot_angles(skeleton, b.frames)
    d = wrap_angle(A[:, None, :] - B[None, :, :])
    return np.sqrt(np.sum(d * d, axis=2))


def dtw_from_costs(cost: np.ndarray) -> float:
    """Cumulative cost of the cheapest monotone alignment (match/insert/delete steps)."""
    cost = np.asarray(cost, dtype=float)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ValueError("DTW needs non-empty sequences")
    c = cost.tolist()
    prev = [math.inf] * (m + 1)
    prev[0] = 0.0
    for i in range(n):
        row = c[i]
        cur = [math.inf] * (m + 1)
        for j in range(m):
            best = prev[j]
            if prev[j + 1] < best:
                best = prev[j + 1]
            if cur[j] < best:
                best = cur[j]
            cur[j + 1] = row[j] + best
        prev = cur
        prev[0] = math.inf
    return prev[m]


def dtw(a: Motion, b: Motion, skeleton: Skeleton) -> float:
    return dtw_from_costs(distance_matrix(a, b, skeleton))


def dtw_table(set_a: Sequence[Motion], set_b: Sequence[Motion], skeleton: Skeleton) -> np.ndarray:
    out = np.empty((len(set_a), len(set_b)))
    for i, a in enumerate(set_a):
        for j, b in enumerate(set_b):
            out[i, j] = dtw(a, b, skeleton)
    return out


def _symmetric_table(motions: Sequence[Motion], skeleton: Skeleton) -> np.ndarray:
    n = len(motions)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dtw(motions[i], motions[j], skeleton)
    return out


@dataclass
class MetricReport:
    min_dtw: float
    mmd: float
    bandwidth: float
    test_ids: list[str] = field(default_factory=list)
    nearest_ids: list[str] = field(default_factory=list)
    nearest_dtw: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "min_dtw": self.min_dtw,
            "mmd": self.mmd,
            "bandwidth": self.bandwidth,
            "per_test": [
                {"test_id": t, "nearest_id": n, "dtw": d}
                for t, n, d in zip(self.test_ids, self.nearest_ids, self.nearest_dtw)
            ],
        }


def min_dtw_from_table(table: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over test rows of the row minimum, and the argmin per row."""
    table = np.asarray(table, dtype=float)
    if table.size == 0:
        raise ValueError("min_dtw needs non-empty sets")
    nearest = np.argmin(table, axis=1)
    return float(np.mean(table[np.arange(len(table)), nearest])), nearest


def min_dtw(test_set: Sequence[Motion], synth_set: Sequence[Motion], skeleton: Skeleton) -> tuple[float, list[int]]:
    if not test_set or not synth_set:
        raise ValueError("min_dtw needs non-empty sets")
    value, nearest = min_dtw_from_table(dtw_table(test_set, synth_set, skeleton))
    return value, nearest.tolist()


def median_bandwidth(pooled_distances: np.ndarray) -> float:
    """Median of the strictly upper-triangular entries of a pooled distance matrix."""
    iu = np.triu_indices(pooled_distances.shape[0], k=1)
    vals = pooled_distances[iu]
    sigma = float(np.median(vals)) if vals.size else 0.0
    if sigma <= 0:
        raise ValueError("median pairwise distance is zero; pass an explicit bandwidth")
    return sigma


def mmd_from_distances(d_aa: np.ndarray, d_bb: np.ndarray, d_ab: np.ndarray, bandwidth: float) -> float:
    """Biased (V-statistic) squared MMD with k = exp(-d^2 / (2 sigma^2))."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    g = -0.5 / bandwidth**2
    kaa = np.exp(g * np.asarray(d_aa) ** 2).mean()
    kbb = np.exp(g * np.asarray(d_bb) ** 2).mean()
    kab = np.exp(g * np.asarray(d_ab) ** 2).mean()
    return max(0.0, float(kaa + kbb - 2.0 * kab))


def mmd(
    set_a: Sequence[Motion],
    set_b: Sequence[Motion],
    skeleton: Skeleton,
    bandwidth: float | None = None,
) -> float:
    """Squared MMD between two motion sets with a Gaussian kernel on DTW distances.

    Without an explicit bandwidth the median pairwise DTW over the pooled sets
    is used.
    """
    value, _ = mmd_with_bandwidth(set_a, set_b, skeleton, bandwidth)
    return value


def mmd_with_bandwidth(set_a, set_b, skeleton, bandwidth=None, pooled: np.ndarray | None = None):
    if not set_a or not set_b:
        raise ValueError("mmd needs non-empty sets")
    na = len(set_a)
    if pooled is None:
        pooled = _symmetric_table(list(set_a) + list(set_b), skeleton)
    if bandwidth is None:
        bandwidth = median_bandwidth(pooled)
    d_aa, d_bb, d_ab = pooled[:na, :na], pooled[na:, na:], pooled[:na, na:]
    return mmd_from_distances(d_aa, d_bb, d_ab, bandwidth), float(bandwidth)


def evaluate_sets(
    test_set: Sequence[Motion],
    candidates: Sequence[Motion],
    skeleton: Skeleton,
    test_ids: Sequence[str],
    candidate_ids: Sequence[str],
    bandwidth: float | None = None,
) -> tuple[MetricReport, np.ndarray]:
    """Min-DTW and MMD in one pass; returns the report and the test x candidate DTW table."""
    if not test_set or not candidates:
        raise ValueError("evaluation needs non-empty test and candidate sets")
    pooled = _symmetric_table(list(test_set) + list(candidates), skeleton)
    n = len(test_set)
    table = pooled[:n, n:]
    value, nearest = min_dtw_from_table(table)
    mmd_value, bw = mmd_with_bandwidth(test_set, candidates, skeleton, bandwidth, pooled)
    report = MetricReport(
        min_dtw=value,
        mmd=mmd_value,
        bandwidth=bw,
        test_ids=list(test_ids),
        nearest_ids=[candidate_ids[k] for k in nearest],
        nearest_dtw=[float(table[i, k]) for i, k in enumerate(nearest)],
    )
    return report, table


def prediction_error(
    predicted: Motion,
    ground_truth: Motion,
    skeleton: Skeleton,
    horizons_ms: Sequence[float],
) -> list[float]:
    """Mean non-root frame distance over the first round(h / frame_time) frames, per horizon."""
    if predicted.frames.shape != ground_truth.frames.shape:
        raise ValueError("predicted and ground-truth motions differ in shape")
    if abs(predicted.frame_time - ground_truth.frame_time) > 1e-9:
        raise ValueError("predicted and ground-truth frame times differ")
    per_frame = np.array([frame_distance(p, g, skeleton) for p, g in zip(predicted.frames, ground_truth.frames)])
    out = []
    for h in horizons_ms:
        n = int(round(h / 1000.0 / predicted.frame_time))
        if n < 1 or n > len(per_frame):
            raise ValueError(f"horizon {h} ms needs {n} frames; {len(per_frame)} available")
        out.append(float(per_frame[:n].mean()))
    return out
