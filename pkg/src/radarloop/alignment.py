"""Alignment quality: CorAl entropy measures, registration measures and a
logistic alignment classifier trained on self-supervised disturbances."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Se3Pose, transform_cloud
from .registration import NoOverlapError, RegistrationConfig, evaluate_alignment, huber_cost

FEATURES = ("H_j", "H_s", "H_o", "C_f", "C_o", "C_a")
FEATURE_SETS = {
    "coral": ("H_j", "H_s", "H_o"),
    "cfear": ("C_f", "C_o", "C_a"),
    "combined": FEATURES,
}

# name -> (translation m, yaw deg)
DISTURBANCES = {"small": (0.5, 0.5), "medium": (1.0, 2.0), "large": (2.0, 15.0)}

_LOG_2PIE3 = 3.0 * np.log(2.0 * np.pi * np.e)


class MeasuresUndefined(RuntimeError):
    pass


class TrainingFailed(RuntimeError):
    pass


@dataclass(frozen=True)
class EntropyConfig:
    radius: float = 1.5
    min_neighbors: int = 5
    det_floor: float = 1e-12


@dataclass
class QualityVector:
    H_j: float
    H_s: float
    H_o: float
    C_f: float
    C_o: float
    C_a: float

    def as_array(self, names=FEATURES) -> np.ndarray:
        return np.array([getattr(self, n) for n in names] + [1.0])


@dataclass
class LabeledAlignmentSample:
    quality: QualityVector
    aligned: bool
    disturbance: str  # none | small | medium | large
    pair: tuple = ()


def _moment_features(points):
    x, y, z = points.T
    return np.stack([np.ones(len(points)), x, y, z, x * x, x * y, x * z, y * y, y * z, z * z])


def _pair_moments(feats, i, j, n):
    """Sum of neighbour moments over undirected pairs ``(i, j)``, self excluded."""
    out = np.empty((feats.shape[0], n))
    for c, f in enumerate(feats):
        out[c] = np.bincount(i, weights=f[j], minlength=n) + np.bincount(j, weights=f[i], minlength=n)
    return out


def _entropy_from_moments(moments, floor):
    cnt = moments[0]
    mu = moments[1:4] / cnt
    sxx, sxy, sxz, syy, syz, szz = moments[4:] / cnt
    cxx = sxx - mu[0] ** 2
    cxy = sxy - mu[0] * mu[1]
    cxz = sxz - mu[0] * mu[2]
    cyy = syy - mu[1] ** 2
    cyz = syz - mu[1] * mu[2]
    czz = szz - mu[2] ** 2
    det = cxx * (cyy * czz - cyz * cyz) - cxy * (cxy * czz - cyz * cxz) + cxz * (cxy * cyz - cyy * cxz)
    return 0.5 * (_LOG_2PIE3 + np.log(np.maximum(det, floor)))


def compute_entropy_measures(cloud_a, cloud_b, pose: Se3Pose, cfg: EntropyConfig = EntropyConfig()):
    """``(H_s, H_j, H_o)`` for cloud B mapped into A's frame by ``pose``.

    Both entropy means run over the points whose own-cloud neighbourhood has
    at least ``min_neighbors`` members (the point itself included).
    """
    a = np.asarray(cloud_a, dtype=float)[:, :3]
    b = transform_cloud(np.asarray(cloud_b, dtype=float)[:, :3], pose) if len(cloud_b) else np.zeros((0, 3))
    if len(a) == 0 or len(b) == 0:
        raise MeasuresUndefined("empty cloud")
    pts = np.vstack([a, b])
    src = np.concatenate([np.zeros(len(a), dtype=int), np.ones(len(b), dtype=int)])
    n = len(pts)
    pairs = cKDTree(pts).query_pairs(cfg.radius, output_type="ndarray")
    i, j = (pairs[:, 0], pairs[:, 1]) if len(pairs) else (np.zeros(0, int), np.zeros(0, int))
    same = src[i] == src[j]
    feats = _moment_features(pts)
    m_sep = feats + _pair_moments(feats, i[same], j[same], n)
    m_joint = m_sep + _pair_moments(feats, i[~same], j[~same], n)
    h_sep = _entropy_from_moments(m_sep, cfg.det_floor)
    h_joint = _entropy_from_moments(m_joint, cfg.det_floor)
    valid = m_sep[0] >= cfg.min_neighbors
    if not valid.any():
        raise MeasuresUndefined("no point reaches min_neighbors")
    cross = np.zeros(n, dtype=bool)
    cross[i[~same]] = True
    cross[j[~same]] = True
    return float(h_sep[valid].mean()), float(h_joint[valid].mean()), float(cross.mean())


def quality_vector(
    query_cloud,
    candidate_cloud,
    query_surface,
    candidate_surface,
    pose: Se3Pose,
    entropy_cfg: EntropyConfig = EntropyConfig(),
    reg_cfg: RegistrationConfig = RegistrationConfig(),
    entropy: bool = True,
) -> QualityVector:
    """Quality vector for ``pose`` mapping query coordinates into the candidate frame.

    With ``entropy=False`` the CorAl measures are skipped and left as NaN.
    """
    if entropy:
        # candidate is cloud A, the query is mapped into its frame
        h_s, h_j, h_o = compute_entropy_measures(candidate_cloud, query_cloud, pose, entropy_cfg)
    else:
        h_s = h_j = h_o = float("nan")
    try:
        c_f, c_o, c_a = evaluate_alignment(query_surface, candidate_surface, pose, reg_cfg)
    except NoOverlapError:
        c_f = float(huber_cost(np.array([reg_cfg.radius]), reg_cfg.huber)[0])
        c_o, c_a = 0, 0.5 * (len(query_surface) + len(candidate_surface))
    return QualityVector(h_j, h_s, h_o, c_f, float(c_o), c_a)


def disturbance_pose(translation: float, yaw_deg: float, rng: np.random.Generator, planar: bool = True) -> Se3Pose:
    """Translation of fixed length in a uniform random direction plus a signed yaw.

    The direction lies in the ground plane unless ``planar`` is off.
    """
    sign = rng.choice([-1.0, 1.0])
    if planar:
        theta = rng.uniform(0.0, 2.0 * np.pi)
        d = np.array([np.cos(theta), np.sin(theta), 0.0])
    else:
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
    t = translation * d
    return Se3Pose.from_xyz_yaw(t[0], t[1], t[2], sign * np.radians(yaw_deg))


def synthesize_training_set(
    keyframes,
    rng: np.random.Generator,
    disturbances: dict = DISTURBANCES,
    stride: int = 1,
    entropy_cfg: EntropyConfig = EntropyConfig(),
    reg_cfg: RegistrationConfig = RegistrationConfig(),
    cloud_of=lambda kf: kf.local_map,
    planar: bool = True,
    entropy: bool = True,
) -> list[LabeledAlignmentSample]:
    """Positives at the odometry transform, one negative per disturbance class.

    Pairs are ``(keyframes[i - stride], keyframes[i])``; negatives compose the
    disturbance onto the odometry transform and are *not* re-registered.
    """
    if len(keyframes) < stride + 1:
        raise ValueError("need at least two keyframes")
    samples = []
    for i in range(stride, len(keyframes)):
        cand, query = keyframes[i - stride], keyframes[i]
        odo = cand.pose.inverse() @ query.pose
        poses = [("none", odo)]
        for name, (t, yaw) in disturbances.items():
            poses.append((name, disturbance_pose(t, yaw, rng, planar) @ odo))
        for name, pose in poses:
            try:
                qv = quality_vector(cloud_of(query), cloud_of(cand), query.surface, cand.surface, pose, entropy_cfg, reg_cfg, entropy)
            except MeasuresUndefined:
                continue
            samples.append(LabeledAlignmentSample(qv, name == "none", name, (cand.id, query.id)))
    return samples


# ---------------------------------------------------------------- logistic regression


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LogisticModel:
    """Logistic regression on standardized features; last weight is the bias."""

    weights: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    feature_names: tuple = ()
    config_hash: str = ""
    iterations: int = 0

    def standardize(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return np.hstack([(X - self.mean) / self.std, np.ones((len(X), 1))])

    def decision(self, X) -> np.ndarray:
        return self.standardize(X) @ self.weights

    def predict_proba(self, X) -> np.ndarray:
        return sigmoid(self.decision(X))

    @property
    def raw_weights(self) -> np.ndarray:
        """Weights acting on ``[x, 1]`` with the standardization folded in."""
        w = self.weights[:-1] / self.std
        return np.append(w, self.weights[-1] - w @ self.mean)

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "feature_names": list(self.feature_names),
            "config_hash": self.config_hash,
            "iterations": self.iterations,
        }

    @classmethod
    def from_dict(cls, d) -> "LogisticModel":
        return cls(
            np.array(d["weights"], dtype=float),
            np.array(d["mean"], dtype=float),
            np.array(d["std"], dtype=float),
            tuple(d.get("feature_names", ())),
            d.get("config_hash", ""),
            d.get("iterations", 0),
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "LogisticModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def train_logistic(
    X, y, l2: float = 1.0, max_iterations: int = 100, tol: float = 1e-8, feature_names=(), cfg_hash="", sample_weight=None
) -> LogisticModel:
    """L2-regularized logistic regression by iteratively reweighted least squares.

    Features are standardized first; the bias is not penalized. A singular
    Newton system temporarily raises the ridge by 10x. ``sample_weight``
    scales each sample's log-likelihood term.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if len(np.unique(y)) < 2:
        raise TrainingFailed("both classes must be present")
    sw = np.ones(len(y)) if sample_weight is None else np.asarray(sample_weight, dtype=float).reshape(-1)
    mean = X.mean(axis=0)
    std = X.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    Z = np.hstack([(X - mean) / std, np.ones((len(X), 1))])
    d = Z.shape[1]
    penalty = np.full(d, l2)
    penalty[-1] = 0.0
    w = np.zeros(d)
    it = 0
    for it in range(1, max_iterations + 1):
        p = sigmoid(Z @ w)
        s = np.maximum(p * (1 - p), 1e-12)
        g = Z.T @ (sw * (p - y)) + penalty * w
        H = Z.T @ ((sw * s)[:, None] * Z) + np.diag(penalty)
        ridge = 0.0
        while True:
            try:
                step = np.linalg.solve(H + ridge * np.eye(d), g)
                if np.all(np.isfinite(step)):
                    break
            except np.linalg.LinAlgError:
                pass
            ridge = max(ridge * 10.0, 1e-8 if l2 == 0 else 10.0 * l2)
        w = w - step
        if np.linalg.norm(step) < tol:
            break
    return LogisticModel(w, mean, std, tuple(feature_names), cfg_hash, it)


@dataclass
class AlignmentClassifier:
    model: LogisticModel
    feature_set: str = "cfear"

    @property
    def names(self):
        return FEATURE_SETS[self.feature_set]

    def features(self, qv: QualityVector) -> np.ndarray:
        return qv.as_array(self.names)[:-1]

    def d_align(self, qv: QualityVector) -> float:
        return float(self.model.decision(self.features(qv))[0])

    def save(self, path) -> None:
        d = self.model.to_dict()
        d["feature_set"] = self.feature_set
        with open(path, "w") as fh:
            json.dump(d, fh, indent=1)

    @classmethod
    def load(cls, path) -> "AlignmentClassifier":
        with open(path) as fh:
            d = json.load(fh)
        return cls(LogisticModel.from_dict(d), d.get("feature_set", "cfear"))


def classify_alignment(qv: QualityVector, clf: AlignmentClassifier) -> float:
    """``p_align = 1 / (1 + exp(-d_align))``."""
    return float(sigmoid(np.array([clf.d_align(qv)]))[0])


def train_alignment_classifier(samples, feature_set: str = "cfear", l2: float = 1.0, settings: dict | None = None) -> AlignmentClassifier:
    names = FEATURE_SETS[feature_set]
    X = np.array([s.quality.as_array(names)[:-1] for s in samples])
    y = np.array([s.aligned for s in samples], dtype=float)
    h = config_hash({"feature_set": feature_set, "l2": l2, "balanced": True, **(settings or {})})
    return AlignmentClassifier(train_logistic(X, y, l2, feature_names=names, cfg_hash=h, sample_weight=balanced_weights(y)), feature_set)


def balanced_weights(y):
    """Per-sample weights giving both classes equal total mass, summing to ``len(y)``.

    Synthesis emits one negative per disturbance class for every positive, a
    ratio that says nothing about how often real alignments fail.
    """
    y = np.asarray(y, dtype=float)
    n_pos = max(float(y.sum()), 1.0)
    n_neg = max(float(len(y) - y.sum()), 1.0)
    return np.where(y > 0.5, 0.5 * len(y) / n_pos, 0.5 * len(y) / n_neg)


def samples_to_arrays(samples, names=FEATURES):
    X = np.array([s.quality.as_array(names)[:-1] for s in samples]).reshape(-1, len(names))
    y = np.array([s.aligned for s in samples], dtype=float)
    return X, y

