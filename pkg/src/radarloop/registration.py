"""Point-to-distribution registration of oriented surface points.

The estimated transform ``T`` maps query-frame coordinates into the candidate
frame, i.e. it is the query keyframe's pose expressed in the candidate frame
(``x_c^-1 x_q`` for world poses ``x``). Residuals are
``n_c . (T mu_q - mu_c)`` against the nearest candidate surface point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Se3Pose, se3_exp
from .keyframing import SurfacePoints


class NoOverlapError(RuntimeError):
    pass


@dataclass(frozen=True)
class RegistrationConfig:
    radius: float = 2.0
    min_correspondences: int = 10  # fewer at the final pose counts as no overlap
    huber: float = 0.3
    max_iterations: int = 50
    tolerance: float = 1e-6
    max_halvings: int = 5


@dataclass
class RegistrationResult:
    pose: Se3Pose
    cost: float  # C_f: mean robust cost
    correspondences: int  # C_o
    average_size: float  # C_a
    converged: bool
    iterations: int
    history: list = field(default_factory=list)  # (cost before, cost after) per accepted step


def huber_cost(e, delta):
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_weight(e, delta):
    a = np.abs(e)
    return np.where(a <= delta, 1.0, delta / np.maximum(a, 1e-300))


def associate(query: SurfacePoints, tree: cKDTree, pose: Se3Pose, radius: float):
    """Indices ``(iq, ic)`` of nearest candidate neighbours within ``radius``."""
    p = query.means @ pose.rotation.T + pose.trans
    dist, idx = tree.query(p, k=1, distance_upper_bound=radius)
    ok = np.isfinite(dist)
    return np.flatnonzero(ok), idx[ok]


def residuals(pose: Se3Pose, q_means, c_means, c_normals):
    p = q_means @ pose.rotation.T + pose.trans
    return np.einsum("ij,ij->i", c_normals, p - c_means)


def residual_jacobian(pose: Se3Pose, q_means, c_normals):
    """d residual / d delta for the left update ``T <- exp(delta) T``; rows ``[n^T, (p x n)^T]``."""
    p = q_means @ pose.rotation.T + pose.trans
    return np.hstack([c_normals, np.cross(p, c_normals)])


def _robust_total(pose, qm, cm, cn, delta):
    return float(huber_cost(residuals(pose, qm, cm, cn), delta).sum())


def evaluate_alignment(query: SurfacePoints, candidate: SurfacePoints, pose: Se3Pose, cfg=RegistrationConfig()):
    """Registration measures ``(C_f, C_o, C_a)`` at a fixed pose (no optimisation)."""
    if len(query) == 0 or len(candidate) == 0:
        raise NoOverlapError("empty surface point set")
    tree = cKDTree(candidate.means)
    iq, ic = associate(query, tree, pose, cfg.radius)
    c_a = 0.5 * (len(query) + len(candidate))
    if len(iq) == 0:
        # nothing within reach counts as every point at the association radius
        return float(huber_cost(np.array([cfg.radius]), cfg.huber)[0]), 0, c_a
    e = residuals(pose, query.means[iq], candidate.means[ic], candidate.normals[ic])
    return float(huber_cost(e, cfg.huber).mean()), int(len(iq)), c_a


def register_p2d(
    query: SurfacePoints,
    candidate: SurfacePoints,
    init: Se3Pose | None = None,
    cfg: RegistrationConfig = RegistrationConfig(),
) -> RegistrationResult:
    """Gauss-Newton over se(3) with Huber weights and step halving."""
    if len(query) == 0 or len(candidate) == 0:
        raise NoOverlapError("empty surface point set")
    pose = init if init is not None else Se3Pose.identity()
    tree = cKDTree(candidate.means)
    iq, ic = associate(query, tree, pose, cfg.radius)
    if len(iq) == 0:
        raise NoOverlapError("no correspondences at the initial guess")

    history = []
    converged = False
    it = 0
    for it in range(1, cfg.max_iterations + 1):
        if it > 1:
            iq, ic = associate(query, tree, pose, cfg.radius)
            if len(iq) == 0:
                break
        qm, cm, cn = query.means[iq], candidate.means[ic], candidate.normals[ic]
        e = residuals(pose, qm, cm, cn)
        J = residual_jacobian(pose, qm, cn)
        w = huber_weight(e, cfg.huber)
        H = J.T @ (w[:, None] * J)
        g = J.T @ (w * e)
        damp = 1e-9 * np.trace(H) / 6.0 + 1e-12
        step = -np.linalg.solve(H + damp * np.eye(6), g)
        before = _robust_total(pose, qm, cm, cn, cfg.huber)
        accepted = None
        scale = 1.0
        for _ in range(cfg.max_halvings + 1):
            trial = se3_exp(scale * step) @ pose
            after = _robust_total(trial, qm, cm, cn, cfg.huber)
            if after <= before:
                accepted = trial
                break
            scale *= 0.5
        if accepted is None:
            converged = np.linalg.norm(step) < cfg.tolerance
            break
        history.append((before, after))
        pose = accepted
        if np.linalg.norm(scale * step) < cfg.tolerance:
            converged = True
            break

    c_f, c_o, c_a = evaluate_alignment(query, candidate, pose, cfg)
    return RegistrationResult(pose, c_f, c_o, c_a, converged, it, history)


def registration_jacobian_check(rng: np.random.Generator, n: int = 30, h: float = 1e-6, zero_residual=False) -> float:
    """Max relative error of the analytic residual Jacobian vs central differences."""
    q_means = rng.normal(scale=5.0, size=(n, 3))
    normals = rng.normal(size=(n, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    pose = se3_exp(rng.normal(scale=[1, 1, 1, 0.3, 0.3, 0.3]))
    if zero_residual:
        c_means = q_means @ pose.rotation.T + pose.trans
    else:
        c_means = q_means @ pose.rotation.T + pose.trans + rng.normal(scale=0.5, size=(n, 3))
    J = residual_jacobian(pose, q_means, normals)
    Jn = np.zeros_like(J)
    for k in range(6):
        d = np.zeros(6)
        d[k] = h
        rp = residuals(se3_exp(d) @ pose, q_means, c_means, normals)
        rm = residuals(se3_exp(-d) @ pose, q_means, c_means, normals)
        Jn[:, k] = (rp - rm) / (2 * h)
    return float(np.max(np.abs(J - Jn)) / max(np.max(np.abs(Jn)), 1e-12))
