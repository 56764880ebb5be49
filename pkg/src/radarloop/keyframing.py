"""Keyframe selection, multi-keyframe accumulation and oriented surface points."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import Se3Pose, Trajectory, pose_distance, transform_cloud

KEYFRAME_DISTANCE = 1.5
KEYFRAME_ANGLE_DEG = 5.0


@dataclass
class SurfacePoints:
    """Per-voxel means, unit normals and point counts (CFEAR-style)."""

    means: np.ndarray
    normals: np.ndarray
    weights: np.ndarray

    def __len__(self):
        return len(self.means)

    @classmethod
    def empty(cls) -> "SurfacePoints":
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, dtype=int))

    def transformed(self, pose: Se3Pose) -> "SurfacePoints":
        R = pose.rotation
        return SurfacePoints(self.means @ R.T + pose.trans, self.normals @ R.T, self.weights.copy())

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "normals": self.normals.tolist(), "weights": self.weights.tolist()}

    @classmethod
    def from_dict(cls, d) -> "SurfacePoints":
        return cls(
            np.array(d["means"], dtype=float).reshape(-1, 3),
            np.array(d["normals"], dtype=float).reshape(-1, 3),
            np.array(d["weights"], dtype=int),
        )


@dataclass
class Keyframe:
    id: int
    scan_index: int
    timestamp: float
    pose: Se3Pose
    cloud: np.ndarray  # RANSAC inlier points, sensor frame, columns x y z intensity doppler
    path_length: float
    surface: SurfacePoints = field(default_factory=SurfacePoints.empty)
    local_map: np.ndarray | None = None  # accumulated recent clouds, this keyframe's frame

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scan_index": self.scan_index,
            "timestamp": self.timestamp,
            "translation": self.pose.trans.tolist(),
            "quaternion": self.pose.quat.tolist(),
            "cloud": self.cloud.tolist(),
            "path_length": self.path_length,
            "surface": self.surface.to_dict(),
            "local_map": None if self.local_map is None else self.local_map.tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "Keyframe":
        return cls(
            id=d["id"],
            scan_index=d["scan_index"],
            timestamp=d["timestamp"],
            pose=Se3Pose(d["quaternion"], d["translation"]),
            cloud=np.array(d["cloud"], dtype=float).reshape(-1, 5),
            path_length=d["path_length"],
            surface=SurfacePoints.from_dict(d["surface"]),
            local_map=None if d.get("local_map") is None else np.array(d["local_map"], dtype=float).reshape(-1, 5),
        )


def select_keyframes(
    traj: Trajectory,
    clouds=None,
    distance: float = KEYFRAME_DISTANCE,
    angle_deg: float = KEYFRAME_ANGLE_DEG,
) -> list[Keyframe]:
    """Greedy keyframe selection on the odometry trajectory.

    A new keyframe is emitted once translation or rotation since the last
    keyframe reaches its gate; the first pose is always a keyframe.
    """
    angle = np.radians(angle_deg)
    lengths = traj.path_lengths()
    frames = []
    last = None
    for i, (t, pose) in enumerate(traj):
        if last is not None:
            dt, dr = pose_distance(last, pose)
            if dt < distance - 1e-9 and dr < angle - 1e-12:
                continue
        cloud = np.zeros((0, 5)) if clouds is None else np.asarray(clouds[i], dtype=float).reshape(-1, 5)
        frames.append(Keyframe(len(frames), i, float(t), pose, cloud, float(lengths[i])))
        last = pose
    return frames


def compute_surface_points(cloud, cell_size: float = 1.0, min_points: int = 6, planarity: float = 0.5) -> SurfacePoints:
    """Voxelize, fit a Gaussian per cell, keep planar cells.

    The normal is the eigenvector of the smallest covariance eigenvalue,
    oriented towards the sensor origin. Cells with
    ``lambda_min / lambda_mid > planarity`` are discarded.
    """
    xyz = np.asarray(cloud, dtype=float)[:, :3] if len(cloud) else np.zeros((0, 3))
    if len(xyz) == 0:
        return SurfacePoints.empty()
    keys = np.floor(xyz / cell_size).astype(np.int64)
    _, inverse, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    order = np.argsort(inverse, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(counts)])
    means, normals, weights = [], [], []
    for c in np.flatnonzero(counts >= min_points):
        pts = xyz[order[bounds[c] : bounds[c + 1]]]
        mu = pts.mean(axis=0)
        d = pts - mu
        cov = d.T @ d / len(pts)
        evals, evecs = np.linalg.eigh(cov)
        # collinear or single-point cells have no defined normal
        if evals[1] <= 1e-12 * max(evals[2], 1e-300) or evals[0] / evals[1] > planarity:
            continue
        n = evecs[:, 0]
        if n @ (-mu) < 0:
            n = -n
        means.append(mu)
        normals.append(n / np.linalg.norm(n))
        weights.append(len(pts))
    if not means:
        return SurfacePoints.empty()
    return SurfacePoints(np.array(means), np.array(normals), np.array(weights, dtype=int))


def accumulate_keyframes(frames, k: int) -> np.ndarray:
    """Concatenate the clouds of the last ``k`` keyframes in the newest keyframe's frame."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not frames:
        return np.zeros((0, 5))
    recent = frames[-k:]
    newest = recent[-1]
    inv = newest.pose.inverse()
    parts = []
    for f in recent:
        if f is newest:
            parts.append(np.asarray(f.cloud, dtype=float))
        else:
            parts.append(transform_cloud(f.cloud, inv @ f.pose))
    return np.vstack(parts) if parts else np.zeros((0, 5))


def build_local_maps(frames, submap_keyframes: int = 3, cell_size: float = 1.0, min_points: int = 6, planarity: float = 0.5):
    """Attach a local map (last ``submap_keyframes`` clouds) and its surface points to every keyframe."""
    for i, f in enumerate(frames):
        f.local_map = accumulate_keyframes(frames[: i + 1], submap_keyframes)
        f.surface = compute_surface_points(f.local_map, cell_size, min_points, planarity)
    return frames
