"""Registration-backed verification of retrieved loop candidates and the
combined loop classifier over ``[d_odom, d_sc, d_align, 1]``."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .alignment import (
    EntropyConfig,
    LogisticModel,
    MeasuresUndefined,
    config_hash,
    quality_vector,
    sigmoid,
    train_logistic,
)
from .geometry import Se3Pose
from .place_recognition import tilt_rotation
from .registration import NoOverlapError, RegistrationConfig, RegistrationResult, register_p2d

LOOP_FEATURES = ("d_odom", "d_sc", "d_align")
OUTCOMES = ("success", "safe-failure-low-confidence", "safe-failure-false-low", "dangerous-failure")


@dataclass
class LoopClassifier:
    model: LogisticModel
    threshold: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    @property
    def theta(self) -> np.ndarray:
        """Weights on the raw ``[d_odom, d_sc, d_align, 1]`` vector."""
        return self.model.raw_weights

    def score(self, d_odom: float, d_sc: float, d_align: float) -> float:
        return float(sigmoid(np.array([self.theta @ np.array([d_odom, d_sc, d_align, 1.0])]))[0])

    def to_dict(self) -> dict:
        return {**self.model.to_dict(), "threshold": self.threshold, "theta": self.theta.tolist()}

    @classmethod
    def from_dict(cls, d) -> "LoopClassifier":
        return cls(LogisticModel.from_dict(d), d.get("threshold", 0.9))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "LoopClassifier":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class LoopCandidate:
    query_id: int
    candidate_id: int
    d_sc: float
    d_odom: float
    shift: int
    registration: RegistrationResult | None
    d_align: float  # NaN when registration found no overlap
    y_loop: float  # NaN until scored

    @property
    def pose(self) -> Se3Pose | None:
        """Query pose in the candidate frame."""
        return None if self.registration is None else self.registration.pose

    @property
    def features(self) -> np.ndarray:
        return np.array([self.d_odom, self.d_sc, self.d_align])

    def to_record(self, label=None, threshold=None) -> dict:
        rec = {
            "query": self.query_id,
            "candidate": self.candidate_id,
            "d_sc": self.d_sc,
            "d_odom": self.d_odom,
            "shift": self.shift,
            "d_align": None if math.isnan(self.d_align) else self.d_align,
            "y_loop": None if math.isnan(self.y_loop) else self.y_loop,
        }
        if self.registration is not None:
            rec["translation"] = self.registration.pose.trans.tolist()
            rec["quaternion"] = self.registration.pose.quat.tolist()
        if label is not None:
            rec["gt_label"] = bool(label)
            if threshold is not None:
                rec["outcome"] = outcome_class(self.y_loop, label, threshold)
        return rec


def initial_guess(query, candidate, shift: int, n_sec: int) -> Se3Pose:
    """Yaw of ``shift`` sectors between the gravity-aligned frames, zero translation."""
    yaw = shift * 2.0 * np.pi / n_sec
    c, s = np.cos(yaw), np.sin(yaw)
    Rz = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    m = np.eye(4)
    m[:3, :3] = tilt_rotation(candidate.pose.quat).T @ Rz @ tilt_rotation(query.pose.quat)
    return Se3Pose.from_matrix(m)


def verify_candidate(
    query,
    candidate,
    d_sc: float,
    d_odom: float,
    shift: int,
    align_clf,
    loop_clf: LoopClassifier | None = None,
    n_sec: int = 60,
    reg_cfg: RegistrationConfig = RegistrationConfig(),
    entropy_cfg: EntropyConfig = EntropyConfig(),
) -> LoopCandidate:
    """Register query onto candidate from the descriptor yaw, then score the result.

    No overlap, at the guess or at the refined pose, forces ``y_loop = 0``. Without ``loop_clf`` only ``d_align`` is filled.
    """
    init = initial_guess(query, candidate, shift, n_sec)
    try:
        reg = register_p2d(query.surface, candidate.surface, init, reg_cfg)
        if reg.correspondences < reg_cfg.min_correspondences:
            raise NoOverlapError("registration drifted out of overlap")
        needs_entropy = any(n.startswith("H_") for n in align_clf.names)
        qv = quality_vector(
            query.local_map, candidate.local_map, query.surface, candidate.surface, reg.pose, entropy_cfg, reg_cfg, needs_entropy
        )
        d_align = align_clf.d_align(qv)
    except (NoOverlapError, MeasuresUndefined):
        return LoopCandidate(query.id, candidate.id, d_sc, d_odom, shift, None, float("nan"), 0.0)
    y = float("nan") if loop_clf is None else loop_clf.score(d_odom, d_sc, d_align)
    return LoopCandidate(query.id, candidate.id, d_sc, d_odom, shift, reg, d_align, y)


def train_loop_classifier(candidates, labels, threshold: float = 0.9, l2: float = 1.0, settings: dict | None = None) -> LoopClassifier:
    """Logistic fit of GT labels on ``[d_odom, d_sc, d_align]``; no-overlap candidates are skipped."""
    X, y = [], []
    for c, lab in zip(candidates, labels):
        if c.registration is None or not np.isfinite(c.d_align):
            continue
        X.append(c.features)
        y.append(float(lab))
    h = config_hash({"threshold": threshold, "l2": l2, **(settings or {})})
    model = train_logistic(np.array(X).reshape(-1, 3), np.array(y), l2, feature_names=LOOP_FEATURES, cfg_hash=h)
    return LoopClassifier(model, threshold)


def best_candidate(verified):
    """Arg-max ``y_loop`` regardless of the threshold; ties go to the lower candidate id."""
    scored = [c for c in verified if not math.isnan(c.y_loop)]
    if not scored:
        return None
    return min(scored, key=lambda c: (-c.y_loop, c.candidate_id))


def select_best(verified, threshold: float):
    best = best_candidate(verified)
    return best if best is not None and best.y_loop > threshold else None


def outcome_class(y_loop: float, is_true: bool, threshold: float) -> str:
    """Four-way outcome: accepted/rejected crossed with correct/false loop."""
    accepted = y_loop > threshold
    if is_true:
        return "success" if accepted else "safe-failure-false-low"
    return "dangerous-failure" if accepted else "safe-failure-low-confidence"


def write_records(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_records(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
