"""Static SVG figures: ROC and PR curves, trajectory overlay with loop outcomes."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# fixed ids and no timestamp so reruns write identical files
plt.rcParams["svg.hashsalt"] = "radarloop"
_META = {"Date": None, "Creator": "radarloop"}

OUTCOME_COLORS = {
    "success": "tab:green",
    "safe-failure-false-low": "tab:blue",
    "safe-failure-low-confidence": "tab:orange",
    "dangerous-failure": "tab:red",
}


def _save(fig, path):
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def plot_roc(path, curves: dict, title="ROC") -> None:
    """``curves`` maps a label to ``(points, auroc)``."""
    fig, ax = plt.subplots(figsize=(4, 4))
    for name, (pts, auc) in curves.items():
        ax.plot([p.fpr for p in pts], [p.tpr for p in pts], label=f"{name} ({auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.7", lw=0.8, ls="--")
    ax.set(xlabel="false positive rate", ylabel="true positive rate", title=title, xlim=(0, 1), ylim=(0, 1.02))
    ax.legend(loc="lower right", fontsize=7)
    _save(fig, path)


def plot_pr(path, curves: dict, title="Precision-recall") -> None:
    """``curves`` maps a label to a list of curve points."""
    fig, ax = plt.subplots(figsize=(4, 4))
    for name, pts in curves.items():
        ax.plot([p.recall for p in pts], [p.precision for p in pts], marker=".", ms=3, label=name)
    ax.set(xlabel="recall", ylabel="precision", title=title, xlim=(0, 1.02), ylim=(0, 1.05))
    ax.legend(loc="lower left", fontsize=7)
    _save(fig, path)


def plot_trajectories(path, gt, odometry, slam, loops=(), title="Trajectories") -> None:
    """Top view; ``loops`` holds ``(query_xy, candidate_xy, outcome)`` drawn on the ground truth."""
    fig, ax = plt.subplots(figsize=(5, 5))
    if gt is not None:
        ax.plot(*gt.positions[:, :2].T, color="k", lw=1.0, label="ground truth")
    ax.plot(*odometry.positions[:, :2].T, color="0.55", lw=0.8, ls="--", label="odometry")
    if slam is not None:
        ax.plot(*slam.positions[:, :2].T, color="tab:purple", lw=0.9, label="SLAM")
    seen = set()
    for q, c, outcome in loops:
        lab = outcome if outcome not in seen else None
        seen.add(outcome)
        ax.plot([q[0], c[0]], [q[1], c[1]], color=OUTCOME_COLORS[outcome], lw=0.8, label=lab)
    ax.set(xlabel="x [m]", ylabel="y [m]", title=title)
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best", fontsize=7)
    _save(fig, path)
