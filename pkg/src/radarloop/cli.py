"""Command line: ``radarloop {synth,odometry,train-align,train-loop,slam,eval}``.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
import time
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from . import pipeline as P
from .alignment import AlignmentClassifier, TrainingFailed
from .config import ConfigError, PipelineConfig, apply_overrides, load_config, save_config
from .evaluation import UndefinedMetric, sample_at, trajectory_metrics, write_curve_csv
from .geometry import Trajectory, read_tum, write_tum
from .loop_verification import LoopClassifier, read_records, write_records
from .plots import plot_pr, plot_roc, plot_trajectories
from .pose_graph import write_g2o
from .sensor_sim import read_dataset, write_dataset, write_scan_csv

log = logging.getLogger("radarloop")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(_jsonable(obj), indent=1, sort_keys=True) + "\n")


def cell_name(k: int, top: int) -> str:
    return f"k{k}_top{top}"


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig().validate()
    cfg = apply_overrides(cfg, args.set)
    if getattr(args, "seed", None) is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def _load_dataset(path):
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise DataError(f"{path}: no manifest.json")
    try:
        return read_dataset(path)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _with_dataset_world(cfg: PipelineConfig, meta: dict) -> PipelineConfig:
    """Train in the world the dataset was simulated in (one classifier per environment)."""
    sim = cfg.simulation
    if "scenario" in meta:
        sim = dataclasses.replace(sim, scenario=meta["scenario"])
    if "world_seed" in meta:
        sim = dataclasses.replace(sim, world_seed=int(meta["world_seed"]))
    return dataclasses.replace(cfg, simulation=sim)


def _training_data(cfg, dataset):
    if dataset is None:
        return P.training_sequence(cfg)
    scans, gt, _ = _load_dataset(dataset)
    return scans, gt


def _save_models(directory, models: P.Models) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    models.align.save(directory / "align.json")
    for (k, top), clf in sorted(models.loops.items()):
        clf.save(directory / f"loop_{cell_name(k, top)}.json")


def _load_models(directory, cells) -> P.Models:
    directory = Path(directory)
    try:
        align = AlignmentClassifier.load(directory / "align.json")
        loops = {(k, t): LoopClassifier.load(directory / f"loop_{cell_name(k, t)}.json") for k, t in cells}
    except (OSError, KeyError, ValueError) as exc:
        raise DataError(f"cannot load classifier models from {directory}: {exc}") from exc
    return P.Models(align, loops)


def _keyframe_table(frames):
    return [{"id": f.id, "scan_index": f.scan_index, "timestamp": f.timestamp, "path_length": f.path_length} for f in frames]


def _loop_segments(records, frames, gt_kf):
    segs = []
    for r in records:
        if r.get("selected") and r.get("outcome"):
            segs.append((gt_kf[r["query"]].trans, gt_kf[r["candidate"]].trans, r["outcome"]))
    return segs


def _loop_summary(stats: dict) -> dict:
    keep = (
        "queries",
        "gt_loop_queries",
        "gt_same_direction_queries",
        "gt_opposite_direction_queries",
        "accepted",
        "outcomes",
        "dangerous_failures",
        "max_f1",
        "recall_at_precision_1",
        "auroc",
        "recall_same_direction",
        "recall_opposite_direction",
        "opposite_pairs",
        "opposite_pairs_below_overlap_gate",
    )
    return {k: stats[k] for k in keep if k in stats}


def _best_cell(cells: dict):
    """Highest max-F1, then recall at precision 1; earlier cells win ties."""
    best, key = None, None
    for name, rep in cells.items():
        loops = rep.get("loops")
        if not loops:
            continue
        k = (loops["max_f1"] or 0.0, loops["recall_at_precision_1"] or 0.0)
        if key is None or k > key:
            best, key = name, k
    return best


def _table(cells: dict, best):
    if best is None or "trajectory" not in cells[best]:
        return None
    return cells[best]["trajectory"]


def _write_cell_outputs(cdir, stats, gt, odometry, slam, frames, gt_kf, title):
    write_curve_csv(cdir / "pr.csv", stats["pr_curve"])
    write_curve_csv(cdir / "roc.csv", stats["roc_curve"])
    plot_pr(cdir / "pr.svg", {title: stats["pr_curve"]}, title=f"Loop verification PR, {title}")
    if stats["roc_curve"]:
        plot_roc(cdir / "roc.svg", {title: (stats["roc_curve"], stats["auroc"])}, title=f"Loop verification ROC, {title}")
    plot_trajectories(cdir / "trajectory.svg", gt, odometry, slam, _loop_segments(stats["records"], frames, gt_kf), title=title)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    cfg = _config(args)
    sim = cfg.simulation
    if args.scenario:
        sim = dataclasses.replace(sim, scenario=args.scenario)
    if args.template:
        sim = dataclasses.replace(sim, template=args.template)
    cfg = dataclasses.replace(cfg, simulation=sim).validate()
    scans, gt, meta = P.simulate(cfg)
    out = Path(args.out)
    try:
        write_dataset(out, scans, gt, meta)
        save_config(out / "config.yaml", cfg)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    log.info("wrote %d scans to %s", len(scans), out)
    return EXIT_OK


def cmd_odometry(args) -> int:
    cfg = _config(args)
    scans, _, _ = _load_dataset(args.dataset)
    odo, _ = P.keyframes_from_scans(scans, cfg)
    out = Path(args.out)
    (out / "inliers").mkdir(parents=True, exist_ok=True)
    write_tum(out / "odometry.tum", odo.trajectory)
    for k, cloud in enumerate(odo.inlier_clouds):
        write_scan_csv(out / "inliers" / f"scan_{k:06d}.csv", cloud)
    write_json(out / "odometry.json", {"scans": len(scans), "failed_scans": np.flatnonzero(odo.failed).tolist()})
    save_config(out / "config.yaml", cfg)
    return EXIT_OK


def cmd_train_align(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scans, _ = _training_data(cfg, args.dataset)
    _, frames = P.keyframes_from_scans(scans, cfg)
    clf = P.train_alignment(frames, cfg)
    clf.save(out / "align.json")
    save_config(out / "config.yaml", cfg)
    if args.study:
        held_scans, _, _ = P.simulate(cfg, seed=cfg.seed + cfg.simulation.training_seed_offset + 1, template="loop")
        _, held = P.keyframes_from_scans(held_scans, cfg)
        study = P.alignment_study(frames, held, cfg)
        write_json(out / "alignment_report.json", {fs: {c: auc for c, (_, auc) in row.items()} for fs, row in study.items()})
        for cls in ("small", "medium", "large"):
            plot_roc(out / f"roc_{cls}.svg", {fs: study[fs][cls] for fs in study}, title=f"Scan alignment ROC, {cls}")
    return EXIT_OK


def cmd_train_loop(args) -> int:
    cfg = _config(args)
    align = AlignmentClassifier.load(args.align) if args.align else None
    scans, gt = _training_data(cfg, args.dataset)
    if gt is None:
        raise DataError("loop training needs ground truth")
    _, frames = P.keyframes_from_scans(scans, cfg)
    if align is None:
        align = P.train_alignment(frames, cfg)
    models = P.Models(align, P.train_loop_models(frames, gt, align, cfg, P.grid_cells(cfg), log.info))
    _save_models(args.out, models)
    save_config(Path(args.out) / "config.yaml", cfg)
    return EXIT_OK


def cmd_slam(args) -> int:
    cfg = _config(args)
    scans, gt, meta = _load_dataset(args.dataset)
    cfg = _with_dataset_world(cfg, meta)
    cells = P.grid_cells(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(out / "config.yaml", cfg)

    t0 = time.perf_counter()
    if args.models:
        models = _load_models(args.models, cells)
    elif args.no_train:
        raise DataError("no classifier models given and training disabled")
    else:
        models = P.train_models(cfg, cells, log.info)
    _save_models(out / "models", models)
    t_train = time.perf_counter() - t0

    prepared = P.keyframes_from_scans(scans, cfg)
    odo, frames = prepared
    write_tum(out / "odometry.tum", odo.trajectory)
    write_json(out / "keyframes.json", _keyframe_table(frames))
    if gt is not None:
        write_tum(out / "groundtruth.tum", gt)
    gt_kf = P.gt_keyframe_poses(gt, frames) if gt is not None else None

    timing = {"training_s": t_train, "cells": {}}
    cell_reports, pr_curves = {}, {}
    for k, top in cells:
        name = cell_name(k, top)
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        rcfg = cfg.retrieval_for(k, top)
        res = P.run_slam(scans, cfg, models.align, models.loops[(k, top)], rcfg, prepared=prepared)
        timing["cells"][name] = res.runtime
        write_tum(cdir / "slam.tum", res.trajectory)
        write_tum(cdir / "slam_keyframes.tum", res.keyframe_trajectory)
        write_g2o(cdir / "graph.g2o", res.graph, res.optimization.trajectory.poses)
        rep = {
            "descriptor_keyframes": k,
            "top_k": top,
            "accepted_loops": len(res.accepted),
            "optimization": {
                "chi2": res.optimization.chi2,
                "iterations": res.optimization.iterations,
                "converged": res.optimization.converged,
            },
        }
        if gt is not None:
            stats = P.evaluate_loops(res, gt, cfg, rcfg)
            records = stats["records"]
            rep["loops"] = _loop_summary(stats)
            rep["trajectory"] = P.trajectory_table(res, gt, cfg)
            pr_curves[name] = stats["pr_curve"]
            _write_cell_outputs(cdir, stats, gt, odo.trajectory, res.trajectory, frames, gt_kf, name)
        else:
            records = [c.to_record() for q in sorted(res.verified) for c in res.verified[q]]
            plot_trajectories(cdir / "trajectory.svg", None, odo.trajectory, res.trajectory, title=name)
        write_records(cdir / "verification.jsonl", records)
        write_json(cdir / "report.json", rep)
        cell_reports[name] = rep
        log.info("%s: %d loops accepted", name, len(res.accepted))

    best = _best_cell(cell_reports)
    report = {
        "dataset": meta,
        "seed": cfg.seed,
        "scans": len(scans),
        "keyframes": len(frames),
        "cells": cell_reports,
        "best_cell": best,
        "table": _table(cell_reports, best),
        "kitti_lengths": list(cfg.evaluation.lengths),
        "kitti_length_scale": cfg.evaluation.length_scale,
    }
    write_json(out / "report.json", report)
    if pr_curves:
        plot_pr(out / "pr.svg", pr_curves, title="Loop verification PR")
    timing["total_s"] = time.perf_counter() - t0
    write_json(out / "timing.json", timing)
    return EXIT_OK


def _read_tum(path) -> Trajectory:
    try:
        return read_tum(path)
    except (OSError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def cmd_eval(args) -> int:
    res_dir = Path(args.results)
    try:
        cfg = load_config(res_dir / "config.yaml")
    except ConfigError as exc:
        raise DataError(f"{res_dir}: results directory incomplete ({exc})") from exc
    gt_path = Path(args.gt) if args.gt else res_dir / "groundtruth.tum"
    gt = _read_tum(gt_path)
    odometry = _read_tum(res_dir / "odometry.tum")
    try:
        kf_table = json.loads((res_dir / "keyframes.json").read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"{res_dir}: {exc}") from exc
    frames = [SimpleNamespace(**f) for f in kf_table]
    try:
        gt = sample_at(gt, odometry.timestamps)
        gt_kf = [gt.poses[f.scan_index] for f in frames]
    except (ValueError, IndexError) as exc:
        raise DataError(f"mismatched timestamps between results and ground truth: {exc}") from exc

    out = Path(args.out) if args.out else res_dir / "eval"
    out.mkdir(parents=True, exist_ok=True)
    cells, pr_curves = {}, {}
    for k, top in P.grid_cells(cfg):
        name = cell_name(k, top)
        cdir = res_dir / name
        slam = _read_tum(cdir / "slam.tum")
        try:
            records = read_records(cdir / "verification.jsonl")
        except (OSError, ValueError) as exc:
            raise DataError(f"{cdir}: {exc}") from exc
        rcfg = cfg.retrieval_for(k, top)
        stats = P.score_records(records, frames, gt_kf, cfg, rcfg)
        stats["records"] = records
        odir = out / name
        odir.mkdir(exist_ok=True)
        try:
            table = {"odometry": trajectory_metrics(odometry, gt, cfg.evaluation.lengths), "slam": trajectory_metrics(slam, gt, cfg.evaluation.lengths)}
        except ValueError as exc:
            raise DataError(f"{name}: {exc}") from exc
        cells[name] = {"loops": _loop_summary(stats), "trajectory": table}
        pr_curves[name] = stats["pr_curve"]
        _write_cell_outputs(odir, stats, gt, odometry, slam, frames, gt_kf, name)
        write_records(odir / "verification.jsonl", records)
    best = _best_cell(cells)
    report = {
        "cells": cells,
        "best_cell": best,
        "table": _table(cells, best),
        "kitti_lengths": list(cfg.evaluation.lengths),
        "kitti_length_scale": cfg.evaluation.length_scale,
    }
    write_json(out / "report.json", report)
    plot_pr(out / "pr.svg", pr_curves, title="Loop verification PR")
    if args.print:
        print(format_table(report))
    return EXIT_OK


def format_table(report: dict) -> str:
    t = report.get("table")
    if not t:
        return "no ground truth metrics"
    lines = [f"best cell: {report['best_cell']}", f"{'':10s} {'t_rel %':>9s} {'r_rel deg/100m':>15s} {'ATE m':>8s}"]
    for name in ("odometry", "slam"):
        m = t[name]
        lines.append(f"{name:10s} {m['t_rel']:9.3f} {m['r_rel']:15.3f} {m['ate']:8.3f}")
    return "\n".join(lines)


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("-v", "--verbose", action="store_true")

    ap = argparse.ArgumentParser(prog="radarloop", description="4D radar loop closure and pose-graph SLAM")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="simulate a dataset")
    p.add_argument("out")
    p.add_argument("--scenario", choices=("tunnel", "forest"))
    p.add_argument("--template", choices=("loop", "out_and_back"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("odometry", parents=[common], help="Doppler+IMU odometry of a dataset")
    p.add_argument("dataset")
    p.add_argument("out")
    p.set_defaults(func=cmd_odometry)

    p = sub.add_parser("train-align", parents=[common], help="train the alignment classifier")
    p.add_argument("out")
    p.add_argument("--dataset", help="train on this dataset instead of a simulated training sequence")
    p.add_argument("--study", action="store_true", help="also report held-out ROC for all feature sets")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_align)

    p = sub.add_parser("train-loop", parents=[common], help="train the loop classifiers of the grid")
    p.add_argument("out")
    p.add_argument("--align", help="alignment classifier JSON (trained on the fly if omitted)")
    p.add_argument("--dataset", help="labelled dataset instead of a simulated training sequence")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_loop)

    p = sub.add_parser("slam", parents=[common], help="run the pipeline over the experiment grid")
    p.add_argument("dataset")
    p.add_argument("out")
    p.add_argument("--models", help="directory with align.json and loop_k*_top*.json")
    p.add_argument("--no-train", action="store_true", help="fail instead of training missing models")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_slam)

    p = sub.add_parser("eval", parents=[common], help="metrics, curves and plots for a results directory")
    p.add_argument("results")
    p.add_argument("--gt", help="ground truth TUM file (default: results/groundtruth.tum)")
    p.add_argument("--out", help="output directory (default: results/eval)")
    p.add_argument("--print", action="store_true", help="print the trajectory table")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (np.linalg.LinAlgError, TrainingFailed, UndefinedMetric, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
