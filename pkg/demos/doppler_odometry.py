"""Ego velocity from a single radar sweep, then a whole drive of Doppler odometry.

Run with ``python3 demos/doppler_odometry.py``.
"""

import numpy as np

from radarloop.config import PipelineConfig
from radarloop.evaluation import trajectory_metrics
from radarloop.geometry import Se3Pose
from radarloop.odometry import RansacConfig, estimate_ego_velocity, integrate_odometry
from radarloop.pipeline import simulate
from radarloop.sensor_sim import SensorModel, generate_world, simulate_scan

world = generate_world(1, "forest")
rng = np.random.default_rng(0)

# one sweep while driving 2 m/s forward and drifting left, 40% of the Doppler values are junk
pose = Se3Pose.from_xyz_yaw(0.0, 0.0, 0.7, 0.3)
v_world = pose.rotation @ np.array([2.0, 0.4, 0.0])
scan = simulate_scan(world, pose, v_world, SensorModel.noiseless(outlier_fraction=0.4), rng)
est = estimate_ego_velocity(scan, RansacConfig(seed=0))
print("points", len(scan), "inliers", len(est.inlier_indices))
print("true v  ", pose.rotation.T @ v_world)
print("RANSAC v", est.velocity)

# the default sensor adds range, angle and Doppler noise; odometry drifts
cfg = PipelineConfig()
scans, gt, _ = simulate(cfg)
odo = integrate_odometry(scans, cfg.odometry)
m = trajectory_metrics(odo.trajectory, gt, cfg.evaluation.lengths)
print(f"{len(scans)} scans, ATE {m['ate']:.3f} m, t_rel {m['t_rel']:.2f} %, r_rel {m['r_rel']:.2f} deg/100m")
print("endpoint drift", np.linalg.norm(odo.trajectory.poses[-1].trans - gt.poses[-1].trans))
