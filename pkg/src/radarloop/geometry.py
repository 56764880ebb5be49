"""SE(3)/SO(3) pose algebra, radar scan containers and TUM trajectory I/O.

Quaternions are Hamilton, stored scalar-last ``[qx, qy, qz, qw]``.
Tangent vectors are ordered ``[rho (translation), phi (rotation)]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

_SMALL_ANGLE = 1e-4


class AmbiguousLogError(ValueError):
    """Raised when the rotation angle is at pi and the log is not unique."""


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def _normalize_quat(q):
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q)
    # canonical hemisphere keeps serialization stable
    if q[3] < 0:
        q = -q
    return q


def quat_multiply(a, b):
    ax, ay, az, aw = a
    bx, by, bz, bw = b
    return np.array(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ]
    )


def quat_to_matrix(q):
    x, y, z, w = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class Se3Pose:
    """Rigid transform ``p_parent = R @ p_child + t``."""

    quat: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))
    trans: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = _normalize_quat(self.quat)
        t = np.asarray(self.trans, dtype=float).reshape(3).copy()
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "quat", q)
        object.__setattr__(self, "trans", t)

    @classmethod
    def identity(cls) -> "Se3Pose":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Se3Pose":
        m = np.asarray(m, dtype=float)
        return cls(Rotation.from_matrix(m[:3, :3]).as_quat(), m[:3, 3])

    @classmethod
    def from_rotation(cls, rotation: Rotation, trans=(0.0, 0.0, 0.0)) -> "Se3Pose":
        return cls(rotation.as_quat(), trans)

    @classmethod
    def from_xyz_yaw(cls, x=0.0, y=0.0, z=0.0, yaw=0.0) -> "Se3Pose":
        return cls(np.array([0.0, 0.0, np.sin(yaw / 2), np.cos(yaw / 2)]), [x, y, z])

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_matrix(self.quat)

    @property
    def yaw(self) -> float:
        r = self.rotation
        return float(np.arctan2(r[1, 0], r[0, 0]))

    @property
    def angle(self) -> float:
        return float(2.0 * np.arctan2(np.linalg.norm(self.quat[:3]), abs(self.quat[3])))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.trans
        return m

    def __matmul__(self, other: "Se3Pose") -> "Se3Pose":
        return se3_compose(self, other)

    def inverse(self) -> "Se3Pose":
        return se3_inverse(self)

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.rotation.T + self.trans

    def __eq__(self, other):
        if not isinstance(other, Se3Pose):
            return NotImplemented
        return bool(np.array_equal(self.quat, other.quat) and np.array_equal(self.trans, other.trans))

    def __hash__(self):
        return hash((self.quat.tobytes(), self.trans.tobytes()))

    def __repr__(self):
        return f"Se3Pose(quat={self.quat.tolist()}, trans={self.trans.tolist()})"


def se3_compose(a: Se3Pose, b: Se3Pose) -> Se3Pose:
    return Se3Pose(quat_multiply(a.quat, b.quat), a.rotation @ b.trans + a.trans)


def se3_inverse(p: Se3Pose) -> Se3Pose:
    qi = np.array([-p.quat[0], -p.quat[1], -p.quat[2], p.quat[3]])
    return Se3Pose(qi, -(quat_to_matrix(qi) @ p.trans))


def pose_distance(a: Se3Pose, b: Se3Pose) -> tuple[float, float]:
    """Translation norm and rotation angle of ``a^-1 b``."""
    d = se3_inverse(a) @ b
    return float(np.linalg.norm(d.trans)), d.angle


def so3_exp(phi) -> np.ndarray:
    return Rotation.from_rotvec(np.asarray(phi, dtype=float)).as_matrix()


def _so3_left_jacobian(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) + 0.5 * K + K @ K / 6.0
    return (
        np.eye(3)
        + (1 - np.cos(theta)) / theta**2 * K
        + (theta - np.sin(theta)) / theta**3 * K @ K
    )


def _so3_left_jacobian_inv(phi):
    theta = np.linalg.norm(phi)
    K = skew(phi)
    if theta < _SMALL_ANGLE:
        return np.eye(3) - 0.5 * K + K @ K / 12.0
    half = 0.5 * theta
    coef = (1.0 - half / np.tan(half)) / theta**2
    return np.eye(3) - 0.5 * K + coef * K @ K


def se3_exp(v) -> Se3Pose:
    v = np.asarray(v, dtype=float)
    rho, phi = v[:3], v[3:]
    return Se3Pose(Rotation.from_rotvec(phi).as_quat(), _so3_left_jacobian(phi) @ rho)


def se3_log(p: Se3Pose) -> np.ndarray:
    theta = p.angle
    if np.pi - theta < 1e-9:
        raise AmbiguousLogError(f"rotation angle {theta} is at pi; log is not unique")
    q = p.quat if p.quat[3] >= 0 else -p.quat
    sin_half = np.linalg.norm(q[:3])
    if sin_half < 1e-12:
        # phi ~ 2 * vec(q) for tiny angles
        phi = 2.0 * q[:3] / q[3]
    else:
        phi = q[:3] / sin_half * 2.0 * np.arctan2(sin_half, q[3])
    rho = _so3_left_jacobian_inv(phi) @ p.trans
    return np.concatenate([rho, phi])


def se3_adjoint(p: Se3Pose) -> np.ndarray:
    R = p.rotation
    ad = np.zeros((6, 6))
    ad[:3, :3] = R
    ad[:3, 3:] = skew(p.trans) @ R
    ad[3:, 3:] = R
    return ad


def _se3_q_matrix(rho, phi):
    theta = np.linalg.norm(phi)
    P = skew(phi)
    Rh = skew(rho)
    t2 = theta * theta
    if theta < 1e-3:
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 0.5 * (c2 - 3.0 * (-1.0 / 120.0 + t2 / 5040.0))
    else:
        s, c = np.sin(theta), np.cos(theta)
        c1 = (theta - s) / theta**3
        c2 = (t2 / 2.0 + c - 1.0) / theta**4
        c3 = 0.5 * (c2 + 3.0 * (theta - s - theta**3 / 6.0) / theta**5)
    return (
        0.5 * Rh
        + c1 * (P @ Rh + Rh @ P + P @ Rh @ P)
        + c2 * (P @ P @ Rh + Rh @ P @ P - 3.0 * P @ Rh @ P)
        + c3 * (P @ Rh @ P @ P + P @ P @ Rh @ P)
    )


def se3_left_jacobian(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    rho, phi = v[:3], v[3:]
    J = np.zeros((6, 6))
    Jso3 = _so3_left_jacobian(phi)
    J[:3, :3] = Jso3
    J[3:, 3:] = Jso3
    J[:3, 3:] = _se3_q_matrix(rho, phi)
    return J


def se3_right_jacobian_inv(v) -> np.ndarray:
    # J_r(v) = J_l(-v)
    v = np.asarray(v, dtype=float)
    return np.linalg.inv(se3_left_jacobian(-v))


def transform_cloud(points, pose: Se3Pose) -> np.ndarray:
    """Rigidly transform an ``(N, 3)`` array or the xyz columns of an ``(N, >=3)`` array.

    Extra columns (intensity, doppler) are passed through untouched.
    """
    points = np.asarray(points, dtype=float)
    if points.size == 0:
        return points.copy()
    out = points.copy()
    out[:, :3] = points[:, :3] @ pose.rotation.T + pose.trans
    return out


@dataclass(frozen=True)
class RadarScan:
    """One radar sweep: ``points`` columns are ``x, y, z, intensity, doppler``."""

    points: np.ndarray
    timestamp: float
    imu_orientation: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.0, 1.0]))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float).reshape(-1, 5)
        if np.any(pts[:, 3] < 0):
            raise ValueError("intensity must be non-negative")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "imu_orientation", _normalize_quat(self.imu_orientation))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    @property
    def doppler(self) -> np.ndarray:
        return self.points[:, 4]

    def __len__(self):
        return len(self.points)


class Trajectory:
    """Timestamp-ordered sequence of poses."""

    def __init__(self, timestamps, poses):
        self.timestamps = np.asarray(timestamps, dtype=float)
        self.poses = list(poses)
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamps and poses differ in length")
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.poses)

    def __getitem__(self, i):
        return self.timestamps[i], self.poses[i]

    def __iter__(self):
        return iter(zip(self.timestamps, self.poses))

    @property
    def positions(self) -> np.ndarray:
        return np.array([p.trans for p in self.poses]).reshape(-1, 3)

    def path_lengths(self) -> np.ndarray:
        steps = np.linalg.norm(np.diff(self.positions, axis=0), axis=1)
        return np.concatenate([[0.0], np.cumsum(steps)])

    def transformed(self, pose: Se3Pose) -> "Trajectory":
        return Trajectory(self.timestamps, [pose @ p for p in self.poses])


def format_tum(traj: Trajectory) -> str:
    lines = []
    for t, p in traj:
        vals = [t, *p.trans, *p.quat]
        lines.append(" ".join(repr(float(v)) for v in vals))  # shortest exact round-trip
    return "\n".join(lines) + "\n"


def parse_tum(text: str) -> Trajectory:
    stamps, poses = [], []
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = [float(v) for v in line.split()]
        if len(vals) != 8:
            raise ValueError(f"malformed TUM line: {line!r}")
        stamps.append(vals[0])
        poses.append(Se3Pose(vals[4:8], vals[1:4]))
    return Trajectory(stamps, poses)


def write_tum(path, traj: Trajectory) -> None:
    Path(path).write_text(format_tum(traj))


def read_tum(path) -> Trajectory:
    return parse_tum(Path(path).read_text())
