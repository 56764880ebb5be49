"""Loop ground truth, overlap, ROC/PR curves, KITTI-style drift and ATE."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Se3Pose, Trajectory, transform_cloud

LOOP_DISTANCE = 6.0
OPPOSITE_HEADING_DEG = 90.0
DESK_LENGTHS = (20.0, 40.0, 60.0, 80.0, 100.0, 120.0, 140.0, 160.0)
KITTI_LENGTHS = (100.0, 200.0, 300.0, 400.0, 500.0, 600.0, 700.0, 800.0)


class UndefinedMetric(ValueError):
    pass


@dataclass
class LoopLabel:
    query: int
    candidate: int
    is_true: bool
    distance: float
    heading_diff_deg: float
    overlap: float = float("nan")

    @property
    def opposite(self) -> bool:
        return self.heading_diff_deg > OPPOSITE_HEADING_DEG


def heading_difference_deg(a: Se3Pose, b: Se3Pose) -> float:
    """Angle between the sensor forward axes projected onto the ground plane."""
    fa, fb = a.rotation[:2, 0], b.rotation[:2, 0]
    ang = np.arctan2(fa[0] * fb[1] - fa[1] * fb[0], fa @ fb)
    return float(abs(np.degrees(ang)))


def label_ground_truth_loops(gt_poses, keyframes, threshold: float = LOOP_DISTANCE, recency: int = 20, min_path_gap: float = 30.0):
    """Label every (query, earlier candidate) pair outside the recency exclusion.

    ``gt_poses`` holds one ground-truth pose per keyframe (same order).
    """
    if len(gt_poses) != len(keyframes):
        raise ValueError("need one ground-truth pose per keyframe")
    pos = np.array([p.trans for p in gt_poses]).reshape(-1, 3)
    labels = []
    for qi, q in enumerate(keyframes):
        for ci in range(qi):
            c = keyframes[ci]
            if c.id > q.id - recency or q.path_length - c.path_length < min_path_gap:
                continue
            d = float(np.linalg.norm(pos[qi] - pos[ci]))
            labels.append(LoopLabel(q.id, c.id, d <= threshold, d, heading_difference_deg(gt_poses[qi], gt_poses[ci])))
    return labels


def overlap_ratio(query_cloud, candidate_cloud, rel_pose: Se3Pose, radius: float = 0.5, symmetric: bool = False) -> float:
    """Fraction of query points with a candidate point within ``radius`` after alignment.

    ``rel_pose`` maps query coordinates into the candidate frame.
    """
    q = np.asarray(query_cloud, dtype=float)
    c = np.asarray(candidate_cloud, dtype=float)
    if len(q) == 0 or len(c) == 0:
        return 0.0
    qa = transform_cloud(q[:, :3], rel_pose)
    c = c[:, :3]
    d, _ = cKDTree(c).query(qa, k=1, distance_upper_bound=radius)
    forward = float(np.mean(np.isfinite(d)))
    if not symmetric:
        return forward
    d, _ = cKDTree(qa).query(c, k=1, distance_upper_bound=radius)
    return 0.5 * (forward + float(np.mean(np.isfinite(d))))


@dataclass
class CurvePoint:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    positives_total: int | None = None  # recall denominator if it differs from tp + fn

    @property
    def tpr(self) -> float:
        return self.tp / max(self.tp + self.fn, 1)

    @property
    def fpr(self) -> float:
        return self.fp / max(self.fp + self.tn, 1)

    @property
    def precision(self) -> float:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        total = self.tp + self.fn if self.positives_total is None else self.positives_total
        return self.tp / total if total else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r > 0 else 0.0


def _sweep(scores, labels, positives_total=None):
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels, dtype=bool).reshape(-1)
    if len(scores) != len(labels):
        raise ValueError("scores and labels differ in length")
    P, N = int(labels.sum()), int((~labels).sum())
    pts = [CurvePoint(float("inf"), 0, 0, N, P, positives_total)]
    for thr in np.unique(scores)[::-1]:
        pred = scores >= thr
        tp = int(np.sum(pred & labels))
        fp = int(np.sum(pred & ~labels))
        pts.append(CurvePoint(float(thr), tp, fp, N - fp, P - tp, positives_total))
    return pts


def roc_curve(scores, labels):
    """ROC points over unique score thresholds and the trapezoidal AUROC."""
    labels = np.asarray(labels, dtype=bool)
    if labels.all() or not labels.any():
        raise UndefinedMetric("ROC needs both classes")
    pts = _sweep(scores, labels)
    fpr = np.array([p.fpr for p in pts])
    tpr = np.array([p.tpr for p in pts])
    return pts, float(np.sum(np.diff(fpr) * 0.5 * (tpr[1:] + tpr[:-1])))


def auroc_pair_count(scores, labels) -> float:
    """Mann-Whitney reference: P(score_pos > score_neg) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    pos, neg = s[y], s[~y]
    if len(pos) == 0 or len(neg) == 0:
        raise UndefinedMetric("both classes needed")
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return float((gt + 0.5 * eq) / (len(pos) * len(neg)))


def pr_curve(scores, labels, n_positives: int | None = None):
    """Uninterpolated precision/recall per unique threshold.

    ``n_positives`` overrides the recall denominator (e.g. ground-truth loops
    that retrieval never offered for scoring).
    """
    return _sweep(scores, labels, n_positives)[1:]


def max_f1(curve) -> float:
    return max((p.f1 for p in curve), default=0.0)


def recall_at_precision(curve, precision: float = 1.0) -> float:
    return max((p.recall for p in curve if p.precision >= precision - 1e-12), default=0.0)


def _match(est: Trajectory, gt: Trajectory):
    if len(est) != len(gt) or not np.allclose(est.timestamps, gt.timestamps, atol=1e-6):
        raise ValueError("mismatched timestamps")


def kitti_metrics(est: Trajectory, gt: Trajectory, lengths=DESK_LENGTHS, step: int = 1):
    """``(t_rel %, r_rel deg/100 m)`` averaged over all subsequences of the given lengths."""
    _match(est, gt)
    dist = gt.path_lengths()
    if len(dist) == 0 or dist[-1] < min(lengths):
        raise UndefinedMetric("trajectory shorter than the smallest subsequence length")
    t_err, r_err = [], []
    for first in range(0, len(gt), step):
        for length in lengths:
            last = int(np.searchsorted(dist, dist[first] + length))
            if last >= len(gt):
                continue
            g = gt.poses[first].inverse() @ gt.poses[last]
            e = est.poses[first].inverse() @ est.poses[last]
            err = g.inverse() @ e
            t_err.append(np.linalg.norm(err.trans) / length)
            r_err.append(err.angle / length)
    return float(np.mean(t_err) * 100.0), float(np.degrees(np.mean(r_err)) * 100.0)


def rigid_alignment(src, dst) -> Se3Pose:
    """Closed-form rotation + translation minimising ``|R src + t - dst|`` (no scale)."""
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    ms, md = src.mean(axis=0), dst.mean(axis=0)
    U, _, Vt = np.linalg.svd((dst - md).T @ (src - ms))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    R = U @ D @ Vt
    m = np.eye(4)
    m[:3, :3] = R
    m[:3, 3] = md - R @ ms
    return Se3Pose.from_matrix(m)


def ate(est: Trajectory, gt: Trajectory, align: bool = True) -> float:
    """Position RMSE, after rigid alignment of ``est`` onto ``gt`` unless disabled."""
    _match(est, gt)
    if len(est) < 3:
        raise UndefinedMetric("alignment needs at least 3 poses")
    p, q = est.positions, gt.positions
    if align:
        p = rigid_alignment(p, q).apply(p)
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


def trajectory_metrics(est: Trajectory, gt: Trajectory, lengths=DESK_LENGTHS) -> dict:
    """Table row ``t_rel, r_rel, ate, ate_unaligned``; drift is NaN on sequences too short for it."""
    try:
        t_rel, r_rel = kitti_metrics(est, gt, lengths)
    except UndefinedMetric:
        t_rel = r_rel = float("nan")
    return {"t_rel": t_rel, "r_rel": r_rel, "ate": ate(est, gt), "ate_unaligned": ate(est, gt, align=False)}


def sample_at(traj: Trajectory, timestamps) -> Trajectory:
    """Poses of ``traj`` at exactly matching timestamps."""
    idx = np.searchsorted(traj.timestamps, timestamps)
    idx = np.clip(idx, 0, len(traj) - 1)
    if not np.allclose(traj.timestamps[idx], timestamps, atol=1e-6):
        raise ValueError("mismatched timestamps")
    return Trajectory(traj.timestamps[idx], [traj.poses[i] for i in idx])


def write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "tp", "fp", "tn", "fn", "tpr", "fpr", "precision", "recall"])
        for p in curve:
            w.writerow([p.threshold, p.tp, p.fp, p.tn, p.fn, p.tpr, p.fpr, p.precision, p.recall])
