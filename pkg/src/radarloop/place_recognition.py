"""ScanContext place recognition with intensity-sum encoding and coupled
odometry/appearance retrieval."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import quat_to_matrix
from .keyframing import accumulate_keyframes

EMPTY = -1.0


@dataclass
class ScanContextDescriptor:
    matrix: np.ndarray  # (n_ring, n_sec)
    max_range: float
    keyframe_ids: tuple = ()

    @property
    def n_ring(self) -> int:
        return self.matrix.shape[0]

    @property
    def n_sec(self) -> int:
        return self.matrix.shape[1]

    @property
    def occupancy(self) -> float:
        return float(np.mean(self.matrix != EMPTY))


@dataclass(frozen=True)
class RetrievalConfig:
    descriptor_keyframes: int = 1
    top_k: int = 1
    recency_exclusion: int = 20
    min_path_gap: float = 30.0
    drift_rate: float = 0.05
    d_odom_cap: float = 5.0
    n_ring: int = 20
    n_sec: int = 60
    max_range: float = 40.0
    intensity_weight: float = 1000.0

    def __post_init__(self):
        if self.descriptor_keyframes < 1 or self.top_k < 1:
            raise ValueError("descriptor_keyframes and top_k must be >= 1")


def build_descriptor(cloud, n_ring=20, n_sec=60, max_range=40.0, weight=1000.0, keyframe_ids=()) -> ScanContextDescriptor:
    """Polar grid over the full circle; cell = sum of intensities / weight, empty = -1.

    ``cloud`` must already be expressed in a gravity-aligned frame.
    """
    I = np.zeros((n_ring, n_sec))
    occupied = np.zeros((n_ring, n_sec), dtype=bool)
    pts = np.asarray(cloud, dtype=float).reshape(-1, 5) if len(cloud) else np.zeros((0, 5))
    r = np.hypot(pts[:, 0], pts[:, 1])
    keep = r < max_range
    pts, r = pts[keep], r[keep]
    if len(pts):
        ring = np.minimum((r / max_range * n_ring).astype(int), n_ring - 1)
        az = np.arctan2(pts[:, 1], pts[:, 0])
        sec = np.floor((az + np.pi) / (2 * np.pi) * n_sec).astype(int) % n_sec
        np.add.at(I, (ring, sec), pts[:, 3] / weight)
        occupied[ring, sec] = True
    I[~occupied] = EMPTY
    return ScanContextDescriptor(I, max_range, tuple(keyframe_ids))


def tilt_rotation(orientation_quat) -> np.ndarray:
    """Roll/pitch part of an orientation: ``Rz(yaw)^T R``."""
    R = quat_to_matrix(orientation_quat)
    yaw = np.arctan2(R[1, 0], R[0, 0])
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]]) @ R


def gravity_align(cloud, orientation_quat) -> np.ndarray:
    """Remove roll and pitch: express the cloud in a yaw-only, ground-parallel frame."""
    out = np.asarray(cloud, dtype=float).copy()
    if len(out):
        out[:, :3] = out[:, :3] @ tilt_rotation(orientation_quat).T
    return out


def keyframe_descriptor(frames, cfg: RetrievalConfig) -> ScanContextDescriptor:
    """Descriptor of the newest keyframe from the last ``descriptor_keyframes`` clouds."""
    merged = accumulate_keyframes(frames, cfg.descriptor_keyframes)
    newest = frames[-1]
    ids = tuple(f.id for f in frames[-cfg.descriptor_keyframes:])
    return build_descriptor(
        gravity_align(merged, newest.pose.quat), cfg.n_ring, cfg.n_sec, cfg.max_range, cfg.intensity_weight, ids
    )


def _column_unit(I):
    norms = np.linalg.norm(I, axis=0)
    out = np.zeros_like(I)
    nz = norms > 0
    out[:, nz] = I[:, nz] / norms[nz]
    return out


def descriptor_distance(I_q, I_c) -> tuple[float, int]:
    """Minimum over circular column shifts of the mean column cosine distance.

    The returned shift ``s`` is such that ``I_c ~ roll(I_q, s, axis=1)``.
    Empty cells take part with value -1; zero-norm column pairs count as 1.
    """
    Q = I_q.matrix if isinstance(I_q, ScanContextDescriptor) else np.asarray(I_q, dtype=float)
    C = I_c.matrix if isinstance(I_c, ScanContextDescriptor) else np.asarray(I_c, dtype=float)
    if Q.shape != C.shape:
        raise ValueError(f"descriptor shapes differ: {Q.shape} vs {C.shape}")
    n = Q.shape[1]
    G = _column_unit(Q).T @ _column_unit(C)  # G[j, k] = cos(q_j, c_k)
    j = np.arange(n)
    sims = G[j[None, :], (j[None, :] + j[:, None]) % n]  # row s: column pairs (j, j + s)
    dist = 1.0 - sims.mean(axis=1)
    s = int(np.argmin(dist))
    return float(max(dist[s], 0.0)), s


def odometry_similarity(q, c, drift_rate: float = 0.05, cap: float = 5.0) -> float:
    """Odometry displacement normalised by the drift expected over the travelled path."""
    gap = float(np.linalg.norm(q.pose.trans - c.pose.trans))
    travelled = abs(q.path_length - c.path_length)
    if gap == 0.0:
        return 0.0
    if travelled <= 0.0:
        return cap
    return float(min(gap / (drift_rate * travelled), cap))


@dataclass
class Candidate:
    keyframe: object
    d_sc: float
    d_odom: float
    shift: int

    @property
    def cost(self) -> float:
        return self.d_sc + self.d_odom


def eligible(query, frames, cfg: RetrievalConfig):
    return [
        f
        for f in frames
        if f.id <= query.id - cfg.recency_exclusion and query.path_length - f.path_length >= cfg.min_path_gap
    ]


def retrieve_candidates(query, query_desc, database, cfg: RetrievalConfig) -> list[Candidate]:
    """Top-k of ``database`` (``(keyframe, descriptor)`` pairs) by ``d_sc + d_odom``.

    Exhaustive; ties resolved by the lower keyframe id.
    """
    scored = []
    for kf, desc in database:
        d_sc, shift = descriptor_distance(query_desc, desc)
        d_odom = odometry_similarity(query, kf, cfg.drift_rate, cfg.d_odom_cap)
        scored.append(Candidate(kf, d_sc, d_odom, shift))
    scored.sort(key=lambda c: (c.cost, c.keyframe.id))
    return scored[: cfg.top_k]


def save_descriptor_cache(path, descriptors) -> None:
    """Row-major float64 matrices in ``<path>.bin`` plus a JSON index ``<path>.json``."""
    path = Path(path)
    index = []
    with open(path.with_suffix(".bin"), "wb") as fh:
        for d in descriptors:
            index.append({"offset": fh.tell(), "shape": list(d.matrix.shape), "max_range": d.max_range, "keyframe_ids": list(d.keyframe_ids)})
            fh.write(np.ascontiguousarray(d.matrix, dtype="<f8").tobytes())
    path.with_suffix(".json").write_text(json.dumps({"dtype": "<f8", "order": "C", "descriptors": index}, indent=1))


def load_descriptor_cache(path) -> list[ScanContextDescriptor]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = []
    for e in meta["descriptors"]:
        n = e["shape"][0] * e["shape"][1]
        m = np.frombuffer(raw, dtype="<f8", count=n, offset=e["offset"]).reshape(e["shape"]).copy()
        out.append(ScanContextDescriptor(m, e["max_range"], tuple(e["keyframe_ids"])))
    return out


__all__ = [
    "EMPTY",
    "Candidate",
    "RetrievalConfig",
    "ScanContextDescriptor",
    "build_descriptor",
    "descriptor_distance",
    "eligible",
    "gravity_align",
    "keyframe_descriptor",
    "load_descriptor_cache",
    "odometry_similarity",
    "retrieve_candidates",
    "save_descriptor_cache",
    "tilt_rotation",
]
