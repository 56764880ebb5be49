import numpy as np
import pytest
from scipy.linalg import cho_factor

from radarloop.geometry import Se3Pose, Trajectory, se3_exp
from radarloop.keyframing import Keyframe
from radarloop.pose_graph import (
    Edge,
    GraphError,
    PoseGraph,
    build_graph,
    chi2,
    jacobian_check,
    optimize,
    propagate,
    write_g2o,
)


def _frames(poses, step=1.0):
    return [Keyframe(i, i, float(i), p, np.zeros((0, 5)), step * i) for i, p in enumerate(poses)]


def _square(side=10, step=1.0):
    """Ground-truth square walked counter-clockwise, ending on the start pose."""
    poses, x, y, yaw = [], 0.0, 0.0, 0.0
    for _ in range(4):
        for k in range(int(side / step)):
            poses.append(Se3Pose.from_xyz_yaw(x, y, 0.0, yaw))
            x += step * np.cos(yaw)
            y += step * np.sin(yaw)
        yaw += np.pi / 2
    poses.append(Se3Pose.from_xyz_yaw(x, y, 0.0, yaw))
    return poses


def _drifted(gt, rng, yaw_noise=0.01):
    odo = [gt[0]]
    for a, b in zip(gt[:-1], gt[1:]):
        odo.append(odo[-1] @ (a.inverse() @ b) @ Se3Pose.from_xyz_yaw(0.0, 0.0, 0.0, rng.normal(scale=yaw_noise)))
    return odo


def _random_graph(rng, n=15, loops=4):
    gt = [Se3Pose()]
    for _ in range(n - 1):
        step = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]) + rng.normal(scale=[0.05, 0.05, 0.05, 0.02, 0.02, 0.1])
        gt.append(gt[-1] @ se3_exp(step))
    g = build_graph(_frames(_drifted(gt, rng, 0.03)))
    for _ in range(loops):
        i, j = sorted(rng.choice(n, 2, replace=False))
        g.add_loop(int(j), int(i), (gt[i].inverse() @ gt[j]) @ se3_exp(rng.normal(scale=0.05, size=6)))
    return g


def test_chain_edge_count():
    frames = _frames(_square())
    g = build_graph(frames)
    assert len(g.edges) == len(frames) - 1
    assert [(e.i, e.j) for e in g.edges] == [(k, k + 1) for k in range(len(frames) - 1)]
    g2 = build_graph(frames, [(30, 2, Se3Pose())])
    assert len(g2.edges) == len(frames) and len(g2.loop_edges) == 1
    assert g2.loop_edges[0].robust and not g2.odometry_edges[0].robust


def test_information_spd():
    g = build_graph(_frames(_square()), [(30, 2, Se3Pose())])
    for e in g.edges:
        assert np.array_equal(e.info, e.info.T)
        cho_factor(e.info)  # raises unless positive definite


def test_unknown_node_rejected():
    g = build_graph(_frames(_square()))
    with pytest.raises(GraphError):
        g.add_loop(100, 0, Se3Pose())


def test_bad_information_rejected():
    g = build_graph(_frames(_square()))
    bad = np.eye(6)
    bad[0, 1] = 1.0
    with pytest.raises(GraphError):
        g.add_edge(Edge(0, 1, Se3Pose(), bad))
    with pytest.raises(GraphError):
        g.add_edge(Edge(0, 1, Se3Pose(), -np.eye(6)))


def test_zero_residual_chain_unchanged():
    frames = _frames(_square())
    g = build_graph(frames)
    # edges are composed from the poses, so only round-off remains
    assert chi2(g) < 1e-18
    res = optimize(g)
    assert res.chi2 < 1e-18
    for a, b in zip(res.trajectory.poses, g.poses):
        assert np.max(np.abs(a.matrix() - b.matrix())) < 1e-9


def test_exact_loop_reduces_endpoint_error():
    rng = np.random.default_rng(3)
    gt = _square()
    g = build_graph(_frames(_drifted(gt, rng, 0.03)))
    before = np.linalg.norm(g.poses[-1].trans - gt[-1].trans)
    g.add_loop(len(gt) - 1, 0, gt[0].inverse() @ gt[-1])
    res = optimize(g)
    after = np.linalg.norm(res.trajectory.poses[-1].trans - gt[-1].trans)
    assert before > 0.5
    assert after < before
    assert res.converged


def test_jacobians_match_finite_differences():
    assert jacobian_check(np.random.default_rng(0), n_edges=20) < 1e-4


def test_gauge_fixed_and_chi2_monotone():
    rng = np.random.default_rng(11)
    for _ in range(20):
        g = _random_graph(rng)
        res = optimize(g)
        assert res.trajectory.poses[0] == g.poses[0]
        assert all(b <= a for a, b in zip(res.history[:-1], res.history[1:]))
        assert res.chi2 <= chi2(g)


def test_zero_information_loop_is_inert():
    rng = np.random.default_rng(5)
    gt = _square()
    g = build_graph(_frames(_drifted(gt, rng)))
    g.add_loop(len(gt) - 1, 0, Se3Pose())
    base = optimize(g)
    g.add_loop(20, 3, Se3Pose.from_xyz_yaw(7.0, -3.0, 1.0, 2.0), info=np.zeros((6, 6)))
    again = optimize(g)
    for a, b in zip(base.trajectory.poses, again.trajectory.poses):
        assert np.max(np.abs(a.matrix() - b.matrix())) < 1e-9


def test_iteration_cap_returns_best_iterate():
    g = _random_graph(np.random.default_rng(2), loops=6)
    res = optimize(g, max_iterations=1)
    assert res.iterations == 1
    assert res.chi2 == chi2(g, res.trajectory.poses) <= chi2(g)


def test_single_node_graph():
    g = PoseGraph([Se3Pose()], np.zeros(1))
    res = optimize(g)
    assert res.converged and res.chi2 == 0.0


def test_propagate_identity_correction():
    rng = np.random.default_rng(0)
    scan = Trajectory(np.arange(10.0), [se3_exp(rng.normal(size=6)) for _ in range(10)])
    owner = np.array([0] * 5 + [1] * 5)
    kf = [scan.poses[0], scan.poses[5]]
    out = propagate([0, 1], kf, kf, scan, owner)
    for a, b in zip(out.poses, scan.poses):
        assert np.allclose(a.matrix(), b.matrix(), atol=1e-12)
    shift = Se3Pose.from_xyz_yaw(1.0, 0.0, 0.0, 0.0)
    moved = propagate([0, 1], kf, [kf[0], shift @ kf[1]], scan, owner)
    assert np.allclose(moved.poses[7].matrix(), (shift @ scan.poses[7]).matrix(), atol=1e-12)


def test_g2o_dump(tmp_path):
    g = build_graph(_frames(_square()[:4]), [(3, 0, Se3Pose())])
    write_g2o(tmp_path / "g.g2o", g)
    lines = (tmp_path / "g.g2o").read_text().splitlines()
    assert sum(line.startswith("VERTEX_SE3:QUAT") for line in lines) == 4
    edges = [line.split() for line in lines if line.startswith("EDGE_SE3:QUAT")]
    assert len(edges) == 4
    assert all(len(e) == 3 + 7 + 21 for e in edges)
