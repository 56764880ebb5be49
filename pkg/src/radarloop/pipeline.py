"""End-to-end orchestration shared by the command line and the demos."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .alignment import DISTURBANCES, AlignmentClassifier, synthesize_training_set, train_alignment_classifier
from .config import PipelineConfig
from .evaluation import (
    label_ground_truth_loops,
    max_f1,
    overlap_ratio,
    pr_curve,
    recall_at_precision,
    roc_curve,
    UndefinedMetric,
    trajectory_metrics,
)
from .geometry import Trajectory
from .keyframing import build_local_maps, select_keyframes
from .loop_verification import (
    OUTCOMES,
    LoopClassifier,
    outcome_class,
    select_best,
    train_loop_classifier,
    verify_candidate,
)
from .odometry import OdometryResult, integrate_odometry
from .place_recognition import RetrievalConfig, eligible, keyframe_descriptor, retrieve_candidates
from .pose_graph import OptimizationResult, PoseGraph, build_graph, loop_information, optimize, propagate
from .sensor_sim import fit_speed, generate_sequence, generate_world, route_path

SCALED_COST_REF = 0.01


def simulate(cfg: PipelineConfig, seed: int | None = None, template: str | None = None):
    """``(scans, gt, meta)`` for the configured world; the sequence seed drives sensor and IMU noise."""
    sim = cfg.simulation
    seed = cfg.seed if seed is None else seed
    template = template or sim.template
    world = generate_world(sim.world_seed, sim.scenario)
    kw = {"laps": sim.laps} if template == "loop" else {}
    path = fit_speed(route_path(world, template, **kw), sim.duration)
    scans, gt = generate_sequence(world, path, cfg.sensor, sim.rate, seed, cfg.imu, sim.duration)
    meta = {"scenario": sim.scenario, "template": template, "world_seed": sim.world_seed, "seed": seed}
    return scans, gt, meta


def keyframes_from_scans(scans, cfg: PipelineConfig):
    odo = integrate_odometry(scans, cfg.odometry)
    k = cfg.keyframing
    frames = select_keyframes(odo.trajectory, odo.inlier_clouds, k.distance, k.angle_deg)
    build_local_maps(frames, k.submap_keyframes, k.cell_size, k.min_points, k.planarity)
    return odo, frames


def compute_descriptors(keyframes, rcfg: RetrievalConfig):
    return [keyframe_descriptor(keyframes[: i + 1], rcfg) for i in range(len(keyframes))]


def train_alignment(keyframes, cfg: PipelineConfig) -> AlignmentClassifier:
    a = cfg.alignment
    entropy = a.feature_set != "cfear"
    samples = synthesize_training_set(
        keyframes,
        np.random.default_rng(a.seed),
        stride=a.stride,
        entropy_cfg=cfg.entropy,
        reg_cfg=cfg.registration,
        planar=a.planar_disturbances,
        entropy=entropy,
    )
    return train_alignment_classifier(samples, a.feature_set, a.l2, {"stride": a.stride, "seed": a.seed})


def alignment_study(train_frames, test_frames, cfg: PipelineConfig, feature_sets=("coral", "cfear", "combined")) -> dict:
    """Held-out ROC per feature set and disturbance class: ``{set: {class: (curve, auroc)}}``."""
    a = cfg.alignment
    kw = dict(stride=a.stride, entropy_cfg=cfg.entropy, reg_cfg=cfg.registration, planar=a.planar_disturbances)
    train = synthesize_training_set(train_frames, np.random.default_rng(a.seed), **kw)
    test = synthesize_training_set(test_frames, np.random.default_rng(a.seed + 1), **kw)
    out = {}
    for fs in feature_sets:
        clf = train_alignment_classifier(train, fs, a.l2)
        out[fs] = {}
        for cls in DISTURBANCES:
            sub = [s for s in test if s.disturbance in ("none", cls)]
            out[fs][cls] = roc_curve([clf.d_align(s.quality) for s in sub], [s.aligned for s in sub])
    return out


def verify_queries(keyframes, descriptors, rcfg: RetrievalConfig, align_clf, loop_clf, cfg: PipelineConfig):
    """Retrieve and verify candidates for every keyframe; ``{query id: [LoopCandidate]}``."""
    out = {}
    for qi, q in enumerate(keyframes):
        pool = eligible(q, keyframes[:qi], rcfg)
        if not pool:
            continue
        database = [(kf, descriptors[kf.id]) for kf in pool]
        found = retrieve_candidates(q, descriptors[qi], database, rcfg)
        out[q.id] = [
            verify_candidate(q, c.keyframe, c.d_sc, c.d_odom, c.shift, align_clf, loop_clf, rcfg.n_sec, cfg.registration, cfg.entropy)
            for c in found
        ]
    return out


def gt_keyframe_poses(gt: Trajectory, keyframes):
    return [gt.poses[kf.scan_index] for kf in keyframes]


def candidate_is_true(gt_poses, query_id, candidate_id, threshold) -> bool:
    return bool(np.linalg.norm(gt_poses[query_id].trans - gt_poses[candidate_id].trans) <= threshold)


def constraint_is_correct(gt_poses, cand, threshold, t_tol=1.0, r_tol_deg=5.0) -> bool:
    """True revisit whose registered pose also agrees with the ground truth."""
    if cand.registration is None or not candidate_is_true(gt_poses, cand.query_id, cand.candidate_id, threshold):
        return False
    err = (gt_poses[cand.candidate_id].inverse() @ gt_poses[cand.query_id]).inverse() @ cand.pose
    return bool(np.linalg.norm(err.trans) <= t_tol and np.degrees(err.angle) <= r_tol_deg)


@dataclass
class Models:
    align: AlignmentClassifier
    loops: dict = field(default_factory=dict)  # (k, top_k) -> LoopClassifier


def train_loop_models(frames, gt: Trajectory, align: AlignmentClassifier, cfg: PipelineConfig, cells, log=None) -> dict:
    """One loop classifier per ``(k, top_k)`` cell from retrieved candidates of a labelled sequence."""
    gt_kf = gt_keyframe_poses(gt, frames)
    gate = cfg.evaluation.loop_distance
    out = {}
    for k, top in cells:
        rcfg = cfg.retrieval_for(k, max(top, cfg.verification.training_top_k))
        verified = verify_queries(frames, compute_descriptors(frames, rcfg), rcfg, align, None, cfg)
        cands = [c for cs in verified.values() for c in cs]
        if cfg.verification.label == "constraint":
            labels = [constraint_is_correct(gt_kf, c, gate) for c in cands]
        else:
            labels = [candidate_is_true(gt_kf, c.query_id, c.candidate_id, gate) for c in cands]
        out[(k, top)] = train_loop_classifier(
            cands, labels, cfg.verification.threshold, cfg.verification.l2, {"k": k, "top_k": top, "label": cfg.verification.label}
        )
        if log:
            log(f"loop classifier k={k} top_k={top}: {len(cands)} samples, {sum(labels)} positive")
    return out


def training_sequence(cfg: PipelineConfig):
    """Separate-seed loop sequence of the configured world."""
    scans, gt, _ = simulate(cfg, seed=cfg.seed + cfg.simulation.training_seed_offset, template="loop")
    return scans, gt


def train_models(cfg: PipelineConfig, cells=None, log=None, training=None, frames=None) -> Models:
    """Alignment and loop classifiers, by default from :func:`training_sequence`.

    ``training`` may supply ``(scans, gt)`` instead, and ``frames`` its keyframes. The loop classifier is
    trained per grid cell on retrieved candidates. Under the default
    ``constraint`` labelling a candidate is positive only if it is a true
    revisit and its registration lands near the ground-truth relative pose,
    so wrong constraints at true revisits count as negatives.
    """
    cells = cells or grid_cells(cfg)
    scans, gt = training if training is not None else training_sequence(cfg)
    if frames is None:
        _, frames = keyframes_from_scans(scans, cfg)
    align = train_alignment(frames, cfg)
    return Models(align, train_loop_models(frames, gt, align, cfg, cells, log))


def grid_cells(cfg: PipelineConfig):
    return [(k, t) for k in cfg.grid.descriptor_keyframes for t in cfg.grid.top_k]


@dataclass
class SlamResult:
    odometry: OdometryResult
    keyframes: list
    verified: dict
    accepted: list
    graph: PoseGraph
    optimization: OptimizationResult
    trajectory: Trajectory  # SLAM, one pose per scan
    keyframe_trajectory: Trajectory
    runtime: float


def run_slam(scans, cfg: PipelineConfig, align_clf, loop_clf: LoopClassifier, rcfg: RetrievalConfig, prepared=None) -> SlamResult:
    t0 = time.perf_counter()
    odo, frames = prepared if prepared is not None else keyframes_from_scans(scans, cfg)
    descriptors = compute_descriptors(frames, rcfg)
    verified = verify_queries(frames, descriptors, rcfg, align_clf, loop_clf, cfg)
    accepted = [b for q in sorted(verified) if (b := select_best(verified[q], loop_clf.threshold)) is not None]
    loops = []
    for c in accepted:
        info = loop_information()
        if cfg.pose_graph.loop_information == "scaled":
            # down-weight loops whose mean robust cost exceeds SCALED_COST_REF
            info = info * min(1.0, SCALED_COST_REF / max(c.registration.cost, 1e-12))
        loops.append((c.query_id, c.candidate_id, c.pose, info))
    graph = build_graph(frames, loops)
    opt = optimize(graph, cfg.pose_graph.max_iterations)
    owner = np.zeros(len(scans), dtype=int)
    for kf in frames:
        owner[kf.scan_index :] = kf.id
    traj = propagate([kf.id for kf in frames], [kf.pose for kf in frames], opt.trajectory.poses, odo.trajectory, owner)
    return SlamResult(odo, frames, verified, accepted, graph, opt, traj, opt.trajectory, time.perf_counter() - t0)


def _best_record(records):
    scored = [r for r in records if r.get("y_loop") is not None]
    if not scored:
        return None
    return min(scored, key=lambda r: (-r["y_loop"], r["candidate"]))


def score_records(records, frames, gt_kf, cfg: PipelineConfig, rcfg: RetrievalConfig) -> dict:
    """Label verification records against ground truth and summarise them per query.

    ``records`` are dicts as written by :meth:`LoopCandidate.to_record`;
    ``frames`` need ``id`` and ``path_length``; ``gt_kf`` holds one
    ground-truth pose per frame. Labels, selection flags and outcome classes
    are written into the records in place.
    """
    ev = cfg.evaluation
    threshold = cfg.verification.threshold
    labels = label_ground_truth_loops(gt_kf, frames, ev.loop_distance, rcfg.recency_exclusion, rcfg.min_path_gap)
    true_pairs = [lb for lb in labels if lb.is_true]
    gt_queries = {}
    for lb in true_pairs:
        gt_queries.setdefault(lb.query, []).append(lb)
    opposite_queries = {q for q, lbs in gt_queries.items() if all(lb.opposite for lb in lbs)}
    same_queries = set(gt_queries) - opposite_queries

    by_query = {}
    for r in records:
        r["gt_label"] = candidate_is_true(gt_kf, r["query"], r["candidate"], ev.loop_distance)
        r["selected"] = False
        r.pop("outcome", None)
        by_query.setdefault(r["query"], []).append(r)

    scores, truth, accepted_true, accepted = [], [], set(), 0
    outcomes = dict.fromkeys(OUTCOMES, 0)
    for q in sorted(by_query):
        best = _best_record(by_query[q])
        if best is None:
            continue
        cls = outcome_class(best["y_loop"], best["gt_label"], threshold)
        best["selected"], best["outcome"] = True, cls
        outcomes[cls] += 1
        scores.append(best["y_loop"])
        truth.append(best["gt_label"])
        if best["y_loop"] > threshold:
            accepted += 1
            if best["gt_label"]:
                accepted_true.add(q)

    out = {
        "queries": len(by_query),
        "gt_loop_queries": len(gt_queries),
        "gt_same_direction_queries": len(same_queries),
        "gt_opposite_direction_queries": len(opposite_queries),
        "accepted": accepted,
        "outcomes": outcomes,
        "dangerous_failures": outcomes["dangerous-failure"],
    }
    pr = pr_curve(scores, truth, len(gt_queries)) if scores else []
    out["pr_curve"] = pr
    out["max_f1"] = max_f1(pr)
    out["recall_at_precision_1"] = recall_at_precision(pr, 1.0)
    try:
        roc, auc = roc_curve(scores, truth)
    except UndefinedMetric:
        roc, auc = [], float("nan")
    out["roc_curve"], out["auroc"] = roc, auc
    out["recall_same_direction"] = len(accepted_true & same_queries) / len(same_queries) if same_queries else float("nan")
    out["recall_opposite_direction"] = (
        len(accepted_true & opposite_queries) / len(opposite_queries) if opposite_queries else float("nan")
    )
    out["opposite_labels"] = [lb for lb in true_pairs if lb.opposite]
    return out


def evaluate_loops(result: SlamResult, gt: Trajectory, cfg: PipelineConfig, rcfg: RetrievalConfig) -> dict:
    """Per-query loop statistics, PR/ROC curves and the opposite-direction overlap analysis."""
    frames = result.keyframes
    gt_kf = gt_keyframe_poses(gt, frames)
    records = [c.to_record() for q in sorted(result.verified) for c in result.verified[q]]
    out = score_records(records, frames, gt_kf, cfg, rcfg)
    out["records"] = records
    opp = out.pop("opposite_labels")
    ev = cfg.evaluation
    for lb in opp:
        rel = gt_kf[lb.candidate].inverse() @ gt_kf[lb.query]
        lb.overlap = overlap_ratio(frames[lb.query].cloud, frames[lb.candidate].cloud, rel, ev.overlap_radius)
    out["opposite_pairs"] = len(opp)
    out["opposite_pairs_below_overlap_gate"] = (
        float(np.mean([lb.overlap < ev.overlap_gate for lb in opp])) if opp else float("nan")
    )
    return out


def trajectory_table(result: SlamResult, gt: Trajectory, cfg: PipelineConfig) -> dict:
    lengths = cfg.evaluation.lengths
    return {
        "odometry": trajectory_metrics(result.odometry.trajectory, gt, lengths),
        "slam": trajectory_metrics(result.trajectory, gt, lengths),
    }


__all__ = [
    "Models",
    "alignment_study",
    "SlamResult",
    "compute_descriptors",
    "constraint_is_correct",
    "evaluate_loops",
    "grid_cells",
    "gt_keyframe_poses",
    "keyframes_from_scans",
    "run_slam",
    "score_records",
    "simulate",
    "train_alignment",
    "train_loop_models",
    "train_models",
    "training_sequence",
    "trajectory_table",
    "verify_queries",
]
