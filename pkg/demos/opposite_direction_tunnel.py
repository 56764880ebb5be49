"""Out and back through a tunnel: a forward-looking radar sees different walls on the way back.

The revisits are real but the scans barely overlap, so the verifier should turn them down
with low confidence instead of accepting a wrong constraint.
Run with ``python3 demos/opposite_direction_tunnel.py``.
"""

import dataclasses

import numpy as np

from radarloop.config import PipelineConfig
from radarloop.pipeline import evaluate_loops, keyframes_from_scans, run_slam, simulate, train_models

base = PipelineConfig()
cfg = dataclasses.replace(base, simulation=dataclasses.replace(base.simulation, scenario="tunnel", template="out_and_back"))
scans, gt, _ = simulate(cfg)
prepared = keyframes_from_scans(scans, cfg)
models = train_models(cfg, cells=[(1, 3)])

rcfg = cfg.retrieval_for(1, 3)
res = run_slam(scans, cfg, models.align, models.loops[(1, 3)], rcfg, prepared=prepared)
loops = evaluate_loops(res, gt, cfg, rcfg)

print("queries with an opposite-direction revisit:", loops["gt_opposite_direction_queries"])
print("recall on them:", loops["recall_opposite_direction"])
print("outcomes:", loops["outcomes"])
print(f"{loops['opposite_pairs_below_overlap_gate']:.0%} of {loops['opposite_pairs']} "
      f"opposite pairs overlap less than {cfg.evaluation.overlap_gate}")
scores = [r["y_loop"] for r in loops["records"] if r["selected"] and r["gt_label"]]
if scores:
    print("confidence on true revisits: median", np.median(scores), "max", np.max(scores))
