"""Two laps of the forest: retrieve, verify and close loops, then compare with odometry.

Run with ``python3 demos/loop_closure_forest.py [out_dir]``; plots land in ``out_dir``
(default ``demo_forest``).
"""

import sys
from pathlib import Path

from radarloop.config import PipelineConfig
from radarloop.pipeline import evaluate_loops, keyframes_from_scans, run_slam, simulate, train_models, trajectory_table
from radarloop.plots import plot_pr, plot_trajectories

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_forest")
out.mkdir(exist_ok=True)

cfg = PipelineConfig()
scans, gt, _ = simulate(cfg)
prepared = keyframes_from_scans(scans, cfg)
print(f"{len(scans)} scans, {len(prepared[1])} keyframes")

# classifiers are fitted on a second drive through the same world with another seed
models = train_models(cfg, log=print)

curves = {}
for k, top in [(1, 1), (5, 3)]:
    rcfg = cfg.retrieval_for(k, top)
    res = run_slam(scans, cfg, models.align, models.loops[(k, top)], rcfg, prepared=prepared)
    loops = evaluate_loops(res, gt, cfg, rcfg)
    table = trajectory_table(res, gt, cfg)
    curves[f"k{k}_top{top}"] = loops["pr_curve"]
    print(
        f"k={k} top-{top}: {len(res.accepted)} loops, R@P1 {loops['recall_at_precision_1']:.2f}, "
        f"max-F1 {loops['max_f1']:.2f}, dangerous {loops['dangerous_failures']}"
    )
    print(f"  ATE {table['odometry']['ate']:.3f} -> {table['slam']['ate']:.3f} m, "
          f"t_rel {table['odometry']['t_rel']:.2f} -> {table['slam']['t_rel']:.2f} %")
    plot_trajectories(out / f"trajectory_k{k}_top{top}.svg", gt, res.odometry.trajectory, res.trajectory,
                      title=f"k={k}, top-{top}")

plot_pr(out / "pr.svg", curves)
print("plots in", out)
