"""Pose graph over keyframes with odometry and loop edges, solved by
Levenberg-Marquardt on right-perturbed SE(3) increments.

Edge residual: ``r = log(z^-1 x_i^-1 x_j)``; loop edges use a Cauchy kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .geometry import Se3Pose, Trajectory, se3_adjoint, se3_exp, se3_log, se3_right_jacobian_inv

ODOM_SIGMA_T = 0.02  # m per sqrt(m) travelled
ODOM_SIGMA_R_DEG = 0.05  # deg per sqrt(m) travelled
LOOP_SIGMA_T = 0.3
LOOP_SIGMA_R_DEG = 1.0
CAUCHY_SCALE = 1.0
MIN_EDGE_LENGTH = 0.1  # m; keeps rotation-only edges finite


class GraphError(ValueError):
    pass


def information(sigma_t: float, sigma_r_rad: float) -> np.ndarray:
    return np.diag([sigma_t**-2] * 3 + [sigma_r_rad**-2] * 3)


def odometry_information(length: float) -> np.ndarray:
    m = np.sqrt(max(length, MIN_EDGE_LENGTH))
    return information(ODOM_SIGMA_T * m, np.radians(ODOM_SIGMA_R_DEG) * m)


def loop_information() -> np.ndarray:
    return information(LOOP_SIGMA_T, np.radians(LOOP_SIGMA_R_DEG))


@dataclass
class Edge:
    i: int
    j: int
    z: Se3Pose  # measured x_i^-1 x_j
    info: np.ndarray
    robust: bool = False
    kind: str = "odometry"


@dataclass
class PoseGraph:
    poses: list
    timestamps: np.ndarray
    edges: list = field(default_factory=list)

    @property
    def odometry_edges(self):
        return [e for e in self.edges if e.kind == "odometry"]

    @property
    def loop_edges(self):
        return [e for e in self.edges if e.kind == "loop"]

    def add_edge(self, edge: Edge) -> None:
        n = len(self.poses)
        if not (0 <= edge.i < n and 0 <= edge.j < n):
            raise GraphError(f"edge ({edge.i}, {edge.j}) references an unknown node")
        info = np.asarray(edge.info, dtype=float)
        if info.shape != (6, 6) or not np.allclose(info, info.T, atol=1e-12 * max(1.0, np.abs(info).max())):
            raise GraphError("information must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(info).min() < -1e-9 * max(1.0, np.abs(info).max()):
            raise GraphError("information must be positive semi-definite")
        self.edges.append(edge)

    def add_loop(self, query: int, candidate: int, pose: Se3Pose, info=None, robust=True) -> None:
        """Loop from registration: ``pose`` is the query keyframe in the candidate frame."""
        self.add_edge(Edge(candidate, query, pose, loop_information() if info is None else info, robust, "loop"))


def build_graph(keyframes, loops=()) -> PoseGraph:
    """Odometry chain between consecutive keyframes plus ``loops``.

    ``loops`` holds ``(query_id, candidate_id, pose)`` or objects with
    ``query_id``, ``candidate_id`` and ``pose`` attributes.
    """
    poses = [kf.pose for kf in keyframes]
    g = PoseGraph(poses, np.array([kf.timestamp for kf in keyframes], dtype=float))
    for a, b in zip(keyframes[:-1], keyframes[1:]):
        g.add_edge(Edge(a.id, b.id, a.pose.inverse() @ b.pose, odometry_information(b.path_length - a.path_length)))
    for lp in loops:
        if isinstance(lp, tuple):
            q, c, pose = lp[:3]
            info = lp[3] if len(lp) > 3 else None
        else:
            q, c, pose, info = lp.query_id, lp.candidate_id, lp.pose, None
        g.add_loop(q, c, pose, info)
    return g


def edge_residual(xi: Se3Pose, xj: Se3Pose, z: Se3Pose) -> np.ndarray:
    return se3_log(z.inverse() @ xi.inverse() @ xj)


def edge_jacobians(xi: Se3Pose, xj: Se3Pose, z: Se3Pose):
    """``(r, J_i, J_j)`` for right perturbations ``x <- x exp(delta)``."""
    a = xi.inverse() @ xj
    r = se3_log(z.inverse() @ a)
    jr_inv = se3_right_jacobian_inv(r)
    return r, -jr_inv @ se3_adjoint(a.inverse()), jr_inv


def _cauchy(s, c=CAUCHY_SCALE):
    """Robust cost and IRLS weight for squared Mahalanobis norm ``s``."""
    c2 = c * c
    return c2 * np.log1p(s / c2), 1.0 / (1.0 + s / c2)


def chi2(graph: PoseGraph, poses=None) -> float:
    poses = graph.poses if poses is None else poses
    total = 0.0
    for e in graph.edges:
        r = edge_residual(poses[e.i], poses[e.j], e.z)
        s = float(r @ e.info @ r)
        total += _cauchy(s)[0] if e.robust else s
    return total


def _normal_equations(graph: PoseGraph, poses):
    n = len(poses)
    H = np.zeros((6 * n, 6 * n))
    g = np.zeros(6 * n)
    for e in graph.edges:
        r, Ji, Jj = edge_jacobians(poses[e.i], poses[e.j], e.z)
        W = e.info
        if e.robust:
            W = _cauchy(float(r @ e.info @ r))[1] * e.info
        si, sj = slice(6 * e.i, 6 * e.i + 6), slice(6 * e.j, 6 * e.j + 6)
        WJi, WJj = W @ Ji, W @ Jj
        H[si, si] += Ji.T @ WJi
        H[sj, sj] += Jj.T @ WJj
        H[si, sj] += Ji.T @ WJj
        H[sj, si] += Jj.T @ WJi
        g[si] += Ji.T @ (W @ r)
        g[sj] += Jj.T @ (W @ r)
    return H, g


@dataclass
class OptimizationResult:
    trajectory: Trajectory
    chi2: float
    iterations: int
    converged: bool
    history: list  # chi^2 after every accepted step, starting with the initial value


def optimize(graph: PoseGraph, max_iterations: int = 100, rel_tol: float = 1e-9, lambda0: float = 1e-4) -> OptimizationResult:
    """Levenberg-Marquardt with the first node fixed.

    Only steps that do not increase chi^2 are accepted, so the history is
    non-increasing. A non-converged run returns the best iterate with the flag unset.
    """
    poses = list(graph.poses)
    n = len(poses)
    cost = chi2(graph, poses)
    history = [cost]
    lam = lambda0
    converged = n <= 1 or cost == 0.0
    it = 0
    while not converged and it < max_iterations:
        it += 1
        H, g = _normal_equations(graph, poses)
        Hf, gf = H[6:, 6:], g[6:]
        accepted = False
        while lam < 1e12:
            A = Hf + lam * np.diag(np.maximum(np.diag(Hf), 1e-9))
            try:
                step = -cho_solve(cho_factor(A), gf)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = poses[:1] + [p @ se3_exp(step[6 * k : 6 * k + 6]) for k, p in enumerate(poses[1:])]
            new = chi2(graph, trial)
            if new <= cost:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            converged = True  # no descent direction left at machine precision
            break
        rel = (cost - new) / max(cost, 1e-300)
        poses, cost = trial, new
        history.append(cost)
        lam = max(lam / 10.0, 1e-12)
        if rel < rel_tol or cost == 0.0:
            converged = True
    return OptimizationResult(Trajectory(graph.timestamps, poses), cost, it, converged, history)


def jacobian_check(rng: np.random.Generator, n_edges: int = 20, h: float = 1e-6) -> float:
    """Max relative error of analytic edge Jacobians vs central differences."""
    worst = 0.0
    for _ in range(n_edges):
        xi = se3_exp(rng.normal(scale=[2, 2, 2, 0.5, 0.5, 0.5]))
        xj = se3_exp(rng.normal(scale=[2, 2, 2, 0.5, 0.5, 0.5]))
        z = (xi.inverse() @ xj) @ se3_exp(rng.normal(scale=0.1, size=6))
        _, Ji, Jj = edge_jacobians(xi, xj, z)
        for J, which in ((Ji, 0), (Jj, 1)):
            Jn = np.zeros((6, 6))
            for k in range(6):
                d = np.zeros(6)
                d[k] = h
                if which == 0:
                    rp, rm = edge_residual(xi @ se3_exp(d), xj, z), edge_residual(xi @ se3_exp(-d), xj, z)
                else:
                    rp, rm = edge_residual(xi, xj @ se3_exp(d), z), edge_residual(xi, xj @ se3_exp(-d), z)
                Jn[:, k] = (rp - rm) / (2 * h)
            worst = max(worst, float(np.max(np.abs(J - Jn)) / max(np.max(np.abs(Jn)), 1e-12)))
    return worst


def propagate(keyframe_ids, keyframe_odom, keyframe_opt, scan_odom: Trajectory, scan_to_keyframe) -> Trajectory:
    """Carry the keyframe corrections to every scan: ``x = x_kf_opt x_kf_odo^-1 x_odo``."""
    corr = {k: opt @ odo.inverse() for k, odo, opt in zip(keyframe_ids, keyframe_odom, keyframe_opt)}
    poses = [corr[scan_to_keyframe[i]] @ p for i, (_, p) in enumerate(scan_odom)]
    return Trajectory(scan_odom.timestamps, poses)


def write_g2o(path, graph: PoseGraph, poses=None) -> None:
    poses = graph.poses if poses is None else poses
    iu = np.triu_indices(6)
    with open(path, "w") as fh:
        for k, p in enumerate(poses):
            fh.write("VERTEX_SE3:QUAT %d %s\n" % (k, " ".join(f"{v:.12g}" for v in (*p.trans, *p.quat))))
        fh.write("FIX 0\n")
        for e in graph.edges:
            vals = (*e.z.trans, *e.z.quat, *e.info[iu])
            fh.write("EDGE_SE3:QUAT %d %d %s\n" % (e.i, e.j, " ".join(f"{v:.12g}" for v in vals)))
