import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from radarloop.alignment import (
    DISTURBANCES,
    AlignmentClassifier,
    EntropyConfig,
    LogisticModel,
    MeasuresUndefined,
    QualityVector,
    TrainingFailed,
    classify_alignment,
    compute_entropy_measures,
    sigmoid,
    synthesize_training_set,
    train_alignment_classifier,
    train_logistic,
)
from radarloop.geometry import Se3Pose, transform_cloud


def _plane(rng, n=400, z=0.0, size=6.0):
    xy = rng.uniform(0, size, size=(n, 2))
    return np.column_stack([xy, np.full(n, z) + rng.normal(scale=0.01, size=n)])


def test_identical_clouds(rng):
    a = rng.normal(scale=2.0, size=(300, 3))
    h_s, h_j, h_o = compute_entropy_measures(a, a, Se3Pose())
    assert abs(h_j - h_s) < 1e-9
    assert h_o == 1.0


def test_parallel_planes_inflate_joint_entropy(rng):
    a, b = _plane(rng), _plane(rng, z=0.5)
    h_s, h_j, h_o = compute_entropy_measures(a, b, Se3Pose())
    assert h_j > h_s
    assert h_o > 0.5


def test_far_clouds_do_not_overlap(rng):
    a = rng.normal(size=(100, 3))
    _, _, h_o = compute_entropy_measures(a, a, Se3Pose.from_xyz_yaw(50.0))
    assert h_o == 0.0


def test_sparse_clouds_undefined(rng):
    a = rng.uniform(0, 1000, size=(20, 3))
    with pytest.raises(MeasuresUndefined):
        compute_entropy_measures(a, a + 500.0, Se3Pose())


def test_overlap_symmetric(rng):
    a, b = _plane(rng), _plane(rng, z=0.3)
    T = Se3Pose.from_xyz_yaw(0.5, 0.2, 0.0, 0.1)
    ab = compute_entropy_measures(a, b, T)[2]
    ba = compute_entropy_measures(b, a, T.inverse())[2]
    assert abs(ab - ba) < 1e-9


def test_measures_invariant_under_co_transform(rng):
    a = rng.normal(scale=2.0, size=(300, 3))
    b = rng.normal(scale=2.0, size=(300, 3))
    T = Se3Pose.from_xyz_yaw(0.3, 0.1, 0.0, 0.2)
    G = Se3Pose.from_rotation(Rotation.from_euler("xyz", [0.3, -0.5, 2.0]), [4.0, -1.0, 2.0])
    base = compute_entropy_measures(a, b, T)
    # B's frame is moved too, so the relative pose becomes G T G^-1
    moved = compute_entropy_measures(transform_cloud(a, G), transform_cloud(b, G), G @ T @ G.inverse())
    assert np.allclose(base, moved, atol=1e-6)


def test_training_set_counts(short_forest):
    cfg, _, _, _, frames = short_forest
    subset = frames[:8]
    samples = synthesize_training_set(subset, np.random.default_rng(0), stride=1)
    pos = [s for s in samples if s.aligned]
    neg = [s for s in samples if not s.aligned]
    assert len(pos) == 7 and len(neg) == 21
    assert all((s.disturbance == "none") == s.aligned for s in samples)


def test_zero_disturbance_matches_positive(short_forest):
    frames = short_forest[4][:4]
    samples = synthesize_training_set(frames, np.random.default_rng(0), disturbances={"zero": (0.0, 0.0)})
    for pos, zero in zip(samples[0::2], samples[1::2]):
        assert pos.disturbance == "none" and zero.disturbance == "zero"
        assert np.array_equal(pos.quality.as_array(), zero.quality.as_array(), equal_nan=True)


def test_large_disturbance_magnitude():
    from radarloop.alignment import disturbance_pose

    rng = np.random.default_rng(4)
    t, yaw = DISTURBANCES["large"]
    for _ in range(20):
        d = disturbance_pose(t, yaw, rng)
        assert np.linalg.norm(d.trans) == pytest.approx(2.0, abs=1e-12)
        assert d.trans[2] == 0.0
        assert abs(np.degrees(d.yaw)) == pytest.approx(15.0, abs=1e-9)


def test_logistic_separable_1d():
    x = np.array([0.0, 0.0, 0.0, 1.0, 1.0, 1.0])[:, None]
    y = x[:, 0].copy()
    m = train_logistic(x, y, l2=1.0)
    pred = m.predict_proba(x) > 0.5
    assert np.array_equal(pred, y.astype(bool))
    assert m.predict_proba(np.array([[0.5]]))[0] == pytest.approx(0.5, abs=1e-9)


def test_logistic_label_flip_negates(rng):
    X = rng.normal(size=(200, 3))
    y = (X @ [1.0, -2.0, 0.5] + rng.normal(size=200) > 0).astype(float)
    a = train_logistic(X, y)
    b = train_logistic(X, 1.0 - y)
    assert np.allclose(a.weights, -b.weights, atol=1e-6)


def test_logistic_single_class_fails():
    with pytest.raises(TrainingFailed):
        train_logistic(np.ones((5, 2)), np.ones(5))


def test_logistic_standardisation_and_raw_weights(rng):
    X = rng.normal(loc=[3.0, -5.0], scale=[10.0, 0.1], size=(300, 2))
    y = (X[:, 0] / 10 + (X[:, 1] + 5) / 0.1 > 0).astype(float)
    m = train_logistic(X, y)
    raw = m.raw_weights
    assert np.allclose(X @ raw[:-1] + raw[-1], m.decision(X), atol=1e-9)
    back = LogisticModel.from_dict(m.to_dict())
    assert np.array_equal(back.decision(X), m.decision(X))


def test_sample_weight_equals_duplication(rng):
    X = rng.normal(size=(60, 2))
    y = (X[:, 0] + rng.normal(size=60) > 0).astype(float)
    w = np.where(y > 0, 2.0, 1.0)
    dup = np.vstack([X, X[y > 0]]), np.concatenate([y, y[y > 0]])
    a = train_logistic(X, y, l2=0.0, sample_weight=w)
    b = train_logistic(*dup, l2=0.0)
    # standardization statistics differ, so compare unregularized fits in raw feature space
    assert np.allclose(a.raw_weights, b.raw_weights, atol=1e-6)


def test_balanced_weights():
    from radarloop.alignment import balanced_weights

    w = balanced_weights([1, 0, 0, 0])
    assert np.allclose(w, [2.0, 2 / 3, 2 / 3, 2 / 3])
    assert w.sum() == pytest.approx(4.0)


def test_sigmoid_extremes():
    s = sigmoid(np.array([0.0, 800.0, -800.0]))
    assert s[0] == 0.5 and s[1] == 1.0 and s[2] == 0.0 and np.all(np.isfinite(s))


@pytest.fixture(scope="module")
def trained(short_forest):
    frames = short_forest[4]
    samples = synthesize_training_set(frames, np.random.default_rng(0))
    return samples, train_alignment_classifier(samples, "cfear")


def test_classify_alignment_is_logistic_of_score(trained):
    samples, clf = trained
    qv = samples[0].quality
    assert classify_alignment(qv, clf) == pytest.approx(1.0 / (1.0 + np.exp(-clf.d_align(qv))), abs=1e-15)


def test_training_positives_mostly_accepted(forest_loop):
    # the deployed classifier on its own training sequence; the short unit stretch is too small
    cfg = forest_loop.cfg
    samples = synthesize_training_set(forest_loop.training[2], np.random.default_rng(cfg.alignment.seed), entropy=False)
    clf = forest_loop.models.align
    pos = [classify_alignment(s.quality, clf) for s in samples if s.aligned]
    assert np.mean(np.array(pos) > 0.5) >= 0.95


def test_monotone_in_positive_weight_features(trained):
    samples, clf = trained
    qv = samples[0].quality
    base = classify_alignment(qv, clf)
    for name, w in zip(clf.names, clf.model.raw_weights[:-1]):
        bumped = QualityVector(**{**qv.__dict__, name: getattr(qv, name) + 0.5})
        p = classify_alignment(bumped, clf)
        if w > 0:
            assert p > base
        elif w < 0:
            assert p < base


def test_classifier_file_round_trip(trained, tmp_path):
    samples, clf = trained
    clf.save(tmp_path / "a.json")
    back = AlignmentClassifier.load(tmp_path / "a.json")
    qv = samples[3].quality
    assert back.d_align(qv) == clf.d_align(qv)
    assert back.model.config_hash == clf.model.config_hash


def test_entropy_config_radius_matters(rng):
    a, b = _plane(rng), _plane(rng, z=0.5)
    small = compute_entropy_measures(a, b, Se3Pose(), EntropyConfig(radius=0.3))[2]
    large = compute_entropy_measures(a, b, Se3Pose(), EntropyConfig(radius=1.5))[2]
    assert small == 0.0 and large > 0.5
