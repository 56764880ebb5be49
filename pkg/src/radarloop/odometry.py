"""Doppler + IMU odometry: three-point RANSAC ego velocity and integration."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import RadarScan, Se3Pose, Trajectory, quat_to_matrix


class EstimationFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 100
    inlier_threshold: float = 0.2
    min_inliers: int = 10
    seed: int = 0
    max_condition: float = 1e6
    confidence: float = 0.999
    residual_floor: float = 1e-9  # lower bound of the robust re-gate (m/s)

    def __post_init__(self):
        if self.inlier_threshold <= 0:
            raise ValueError("inlier threshold must be positive")
        if self.min_inliers < 3:
            raise ValueError("min inlier count must be >= 3")


@dataclass
class EgoVelocityEstimate:
    velocity: np.ndarray
    inlier_indices: np.ndarray
    iterations_used: int
    skipped_triplets: int = 0


def solve_triplet(directions, doppler, max_condition=1e6):
    """Velocity from three points, or ``None`` for an ill-conditioned triplet."""
    A = np.asarray(directions, dtype=float)
    if np.linalg.cond(A) > max_condition:
        return None
    return np.linalg.solve(A, -np.asarray(doppler, dtype=float))


def _iterations_needed(inlier_ratio, confidence, cap):
    p_good = inlier_ratio**3
    if p_good >= 1.0:
        return 1
    if p_good <= 0.0:
        return cap
    return min(cap, int(np.ceil(np.log(1.0 - confidence) / np.log(1.0 - p_good))))


def estimate_ego_velocity(scan: RadarScan, cfg: RansacConfig = RansacConfig(), rng=None) -> EgoVelocityEstimate:
    """Sensor-frame velocity ``v`` with ``doppler_i = -u_i . v`` for the inliers."""
    xyz = scan.xyz
    doppler = scan.doppler
    n = len(xyz)
    if n < max(3, cfg.min_inliers):
        raise EstimationFailed(f"only {n} points")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    u = xyz / np.linalg.norm(xyz, axis=1, keepdims=True)

    best_count, best_inliers, skipped = -1, None, 0
    iterations = 0
    needed = cfg.max_iterations
    for iterations in range(1, cfg.max_iterations + 1):
        if iterations > needed:
            iterations -= 1
            break
        idx = rng.choice(n, size=3, replace=False)
        v = solve_triplet(u[idx], doppler[idx], cfg.max_condition)
        if v is None:
            skipped += 1
            continue
        inl = np.flatnonzero(np.abs(doppler + u @ v) <= cfg.inlier_threshold)
        if len(inl) > best_count:
            best_count, best_inliers = len(inl), inl
            needed = _iterations_needed(best_count / n, cfg.confidence, cfg.max_iterations)
    if best_inliers is None or best_count < cfg.min_inliers:
        raise EstimationFailed(f"{max(best_count, 0)} inliers < {cfg.min_inliers}")

    inliers = best_inliers
    # least-squares refit; shrink the set until every member passes the threshold
    for _refit in range(10):
        v, *_ = np.linalg.lstsq(u[inliers], -doppler[inliers], rcond=None)
        resid = np.abs(doppler + u @ v)
        refit = np.flatnonzero(resid <= cfg.inlier_threshold)
        if np.array_equal(refit, inliers):
            break
        if len(refit) < cfg.min_inliers:
            break
        inliers = refit
    # outliers that landed inside the threshold by chance still bias the fit;
    # re-gate at three robust sigmas of the inlier residuals (never above the threshold)
    for _refit in range(20):
        r = np.abs(doppler[inliers] + u[inliers] @ v)
        gate = min(cfg.inlier_threshold, max(3.0 * 1.4826 * np.median(r), cfg.residual_floor))
        keep = inliers[r <= gate]
        if len(keep) == len(inliers) or len(keep) < cfg.min_inliers:
            break
        inliers = keep
        v, *_ = np.linalg.lstsq(u[inliers], -doppler[inliers], rcond=None)
    inliers = inliers[np.abs(doppler[inliers] + u[inliers] @ v) <= cfg.inlier_threshold]
    if len(inliers) < cfg.min_inliers:
        raise EstimationFailed(f"{len(inliers)} inliers after refit")
    return EgoVelocityEstimate(v, inliers, iterations, skipped)


@dataclass
class OdometryResult:
    trajectory: Trajectory
    velocities: np.ndarray  # sensor frame, per scan
    inlier_clouds: list
    failed: np.ndarray  # per-scan flag: velocity held from the previous scan


def integrate_odometry(scans, cfg: RansacConfig = RansacConfig()) -> OdometryResult:
    """Rotate RANSAC velocities to the world with the IMU and integrate (trapezoidal).

    Orientation is taken directly from the IMU. A scan whose estimate fails
    holds the previous velocity and is flagged.
    """
    rng = np.random.default_rng(cfg.seed)
    stamps, poses, vels, clouds = [], [], [], []
    failed = np.zeros(len(scans), dtype=bool)
    pos = np.zeros(3)
    v_prev_world = None
    v_sensor = np.zeros(3)
    for k, scan in enumerate(scans):
        R = quat_to_matrix(scan.imu_orientation)
        try:
            est = estimate_ego_velocity(scan, cfg, rng)
            v_sensor = est.velocity
            clouds.append(scan.points[est.inlier_indices])
        except EstimationFailed:
            failed[k] = True
            clouds.append(np.zeros((0, 5)))
        v_world = R @ v_sensor
        if v_prev_world is not None:
            dt = scan.timestamp - stamps[-1]
            pos = pos + 0.5 * dt * (v_prev_world + v_world)
        v_prev_world = v_world
        stamps.append(scan.timestamp)
        poses.append(Se3Pose(scan.imu_orientation, pos))
        vels.append(v_sensor)
    return OdometryResult(Trajectory(stamps, poses), np.array(vels).reshape(-1, 3), clouds, failed)
