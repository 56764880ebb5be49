"""Synthetic worlds and a directional 4D radar simulator.

Worlds are built from axis-aligned boxes, vertical cylinders and an optional
ground plane at z = 0. Scans are produced by ray casting inside the sensor's
field of view, then corrupted with range/angle/Doppler/intensity noise,
dropout and dynamic-object Doppler outliers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from .geometry import RadarScan, Se3Pose, Trajectory, format_tum

SCENARIOS = ("tunnel", "forest")

# stream ids for counter-based RNG splitting
_STREAM_WORLD = 0
_STREAM_SCAN = 1
_STREAM_IMU = 2


def rng_stream(seed: int, stream: int, counter: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(stream), int(counter)]))


@dataclass
class WorldModel:
    scenario: str
    seed: int
    boxes: np.ndarray  # (M, 6): xmin, ymin, zmin, xmax, ymax, zmax
    box_reflectivity: np.ndarray
    cylinders: np.ndarray  # (K, 5): cx, cy, radius, zmin, zmax
    cylinder_reflectivity: np.ndarray
    ground: bool = True
    ground_reflectivity: float = 1.2e4
    bounds: tuple = (-60.0, 60.0, -60.0, 60.0)
    routes: dict = field(default_factory=dict)
    lane_offset: float = 1.2  # keep-right offset of out-and-back routes

    def same_as(self, other: "WorldModel") -> bool:
        return (
            self.scenario == other.scenario
            and np.array_equal(self.boxes, other.boxes)
            and np.array_equal(self.box_reflectivity, other.box_reflectivity)
            and np.array_equal(self.cylinders, other.cylinders)
            and np.array_equal(self.cylinder_reflectivity, other.cylinder_reflectivity)
            and self.ground == other.ground
        )

    def contains(self, xy) -> np.ndarray:
        xy = np.atleast_2d(xy)
        x0, x1, y0, y1 = self.bounds
        return (xy[:, 0] >= x0) & (xy[:, 0] <= x1) & (xy[:, 1] >= y0) & (xy[:, 1] <= y1)


@dataclass
class SensorModel:
    azimuth_fov_deg: float = 60.0
    elevation_fov_deg: float = 15.0
    max_range: float = 40.0
    range_sigma: float = 0.05
    angle_sigma_deg: float = 0.2
    doppler_sigma: float = 0.05
    doppler_scale_error: float = 0.01
    intensity_sigma: float = 0.2
    object_points: int = 240
    ground_points: int = 150
    dropout: float = 0.0
    outlier_fraction: float = 0.1
    outlier_doppler: float = 3.0
    rays_per_point: int = 4

    def __post_init__(self):
        for name in ("range_sigma", "angle_sigma_deg", "doppler_sigma", "intensity_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("azimuth_fov_deg", "elevation_fov_deg"):
            v = getattr(self, name)
            if not 0 < v <= 180:
                raise ValueError(f"{name} must be in (0, 180]")
        if not 0 <= self.outlier_fraction <= 1 or not 0 <= self.dropout < 1:
            raise ValueError("fractions must lie in [0, 1)")

    @classmethod
    def noiseless(cls, **kw) -> "SensorModel":
        base = dict(
            range_sigma=0.0, angle_sigma_deg=0.0, doppler_sigma=0.0, doppler_scale_error=0.0,
            intensity_sigma=0.0, outlier_fraction=0.0, dropout=0.0,
        )
        base.update(kw)
        return cls(**base)


@dataclass
class ImuModel:
    """Slowly drifting orientation error added to the ground-truth attitude."""

    yaw_drift_deg_per_s: float = 0.08
    tilt_drift_deg_per_s: float = 0.004
    random_walk_deg_per_sqrt_s: float = 0.01


# ---------------------------------------------------------------- worlds


def _wall_panels(rng, x0, y0, x1, y1, side, skip, jitter, panel_len=(1.5, 4.0), height=4.0, smooth=()):
    """Thin boxes along one side of an axis-aligned corridor edge.

    ``side`` is the outward direction (+1/-1) perpendicular to the edge.
    Panels whose centre lies inside ``skip`` rectangles are left out to open
    junctions; inside ``smooth`` intervals the wall is flat (no jitter).
    """
    horizontal = y0 == y1
    a0, a1 = (x0, x1) if horizontal else (y0, y1)
    fixed = y0 if horizontal else x0
    boxes = []
    a = a0
    while a < a1 - 1e-9:
        length = min(rng.uniform(*panel_len), a1 - a)
        centre = a + length / 2
        flat = any(lo <= centre <= hi for lo, hi in smooth)
        offset = 0.0 if flat else rng.uniform(0.0, jitter)
        depth = 0.3 if flat else rng.uniform(0.3, 0.3 + jitter)
        # inner face sits at fixed + side * offset, panel extends outward
        inner = fixed + side * offset
        outer = inner + side * depth
        lo_p, hi_p = min(inner, outer), max(inner, outer)
        cx, cy = (centre, fixed) if horizontal else (fixed, centre)
        if not any(s[0] <= cx <= s[2] and s[1] <= cy <= s[3] for s in skip):
            if horizontal:
                boxes.append([a, lo_p, 0.0, a + length, hi_p, height])
            else:
                boxes.append([lo_p, a, 0.0, hi_p, a + length, height])
        a += length
    return boxes


def _corridor_rect(p, q, half):
    return (min(p[0], q[0]) - half, min(p[1], q[1]) - half, max(p[0], q[0]) + half, max(p[1], q[1]) + half)


def _tunnel_world(seed, rng):
    half = 4.0
    lx, ly = 25.0, 12.5
    ring = [(0.0, 0.0), (lx, 0.0), (lx, ly), (0.0, ly)]
    spur_x = 12.5
    spur = [(spur_x, 0.0), (spur_x, -40.0)]
    branch = [(0.0, ly * 0.5), (-20.0, ly * 0.5)]
    segments = [(ring[i], ring[(i + 1) % 4]) for i in range(4)] + [tuple(spur), tuple(branch)]
    rects = [_corridor_rect(p, q, half) for p, q in segments]

    boxes = []
    for (p, q), rect in zip(segments, rects):
        others = [r for r in rects if r != rect]
        xmin, ymin, xmax, ymax = rect
        smooth = []
        # one feature-poor straight stretch per long corridor
        if max(abs(q[0] - p[0]), abs(q[1] - p[1])) > 20:
            lo = (xmin if p[1] == q[1] else ymin) + 6.0
            smooth.append((lo, lo + 8.0))
        jitter = 0.8
        if p[1] == q[1]:
            boxes += _wall_panels(rng, xmin, ymin, xmax, ymin, -1, others, jitter, smooth=smooth)
            boxes += _wall_panels(rng, xmin, ymax, xmax, ymax, +1, others, jitter, smooth=smooth)
        else:
            boxes += _wall_panels(rng, xmin, ymin, xmin, ymax, -1, others, jitter, smooth=smooth)
            boxes += _wall_panels(rng, xmax, ymin, xmax, ymax, +1, others, jitter, smooth=smooth)
    # end caps of dead-end corridors
    boxes.append([spur_x - half - 1, -40.0 - half - 0.5, 0.0, spur_x + half + 1, -40.0 - half, 4.0])
    boxes.append([-20.0 - half - 0.5, ly * 0.5 - half - 1, 0.0, -20.0 - half, ly * 0.5 + half + 1, 4.0])
    boxes = np.array(boxes, dtype=float)

    # sparse side features: pillars and equipment boxes hugging the walls
    cyl, extra = [], []
    for (p, q), rect in zip(segments, rects):
        length = abs(q[0] - p[0]) + abs(q[1] - p[1])
        n = max(1, int(length / 10.0))
        for _ in range(n):
            s = rng.uniform(0.1, 0.9)
            c = np.array(p) + s * (np.array(q) - np.array(p))
            d = (np.array(q) - np.array(p)) / length
            normal = np.array([-d[1], d[0]]) * rng.choice([-1.0, 1.0])
            pos = c + normal * (half - 0.3)
            if rng.uniform() < 0.5:
                cyl.append([pos[0], pos[1], rng.uniform(0.2, 0.35), 0.0, 4.0])
            else:
                sz = rng.uniform(0.4, 0.7, size=2)
                extra.append([pos[0] - sz[0] / 2, pos[1] - sz[1] / 2, 0.0, pos[0] + sz[0] / 2, pos[1] + sz[1] / 2, rng.uniform(1.0, 2.5)])
    if extra:
        boxes = np.vstack([boxes, np.array(extra)])
    cylinders = np.array(cyl, dtype=float).reshape(-1, 5)
    routes = {
        "loop": [(0.0, 0.0), (lx, 0.0), (lx, ly), (0.0, ly)],
        "out_and_back": [(spur_x, -38.0), (spur_x, 0.0), (lx, 0.0), (lx, ly), (lx * 0.5, ly)],
    }
    return WorldModel(
        scenario="tunnel",
        seed=seed,
        boxes=boxes,
        box_reflectivity=rng.uniform(2e4, 8e4, size=len(boxes)),
        cylinders=cylinders,
        cylinder_reflectivity=rng.uniform(4e4, 1.2e5, size=len(cylinders)),
        ground=True,
        ground_reflectivity=1.5e4,
        bounds=(-30.0, 35.0, -50.0, 25.0),
        routes=routes,
        lane_offset=2.0,
    )


def _forest_world(seed, rng):
    extent = 50.0
    n_trees = 320
    keep_clear = 1.2
    side = 18.0
    route = [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side)]
    loop = Path2D(PathSpec(route, kind="loop", laps=1))
    track = np.array([loop.pose_at(s)[0] for s in np.arange(0.0, loop.lap_length, 0.25)])
    clear = cKDTree(track)
    trees = []
    while len(trees) < n_trees:
        c = rng.uniform(-extent, extent, size=2)
        if clear.query(c)[0] < keep_clear + 0.5:
            continue
        trees.append([c[0], c[1], rng.uniform(0.12, 0.45), 0.0, rng.uniform(6.0, 15.0)])
    cylinders = np.array(trees)
    # undergrowth: low boxes
    bushes = []
    while len(bushes) < 60:
        c = rng.uniform(-extent, extent, size=2)
        if clear.query(c)[0] < keep_clear + 1.0:
            continue
        s = rng.uniform(0.4, 1.5, size=2)
        bushes.append([c[0] - s[0] / 2, c[1] - s[1] / 2, 0.0, c[0] + s[0] / 2, c[1] + s[1] / 2, rng.uniform(0.4, 1.2)])
    boxes = np.array(bushes)
    routes = {
        "loop": route,
        "out_and_back": [(0.0, 0.0), (side, 0.0), (side, side), (0.0, side), (0.0, 6.0)],
    }
    return WorldModel(
        scenario="forest",
        seed=seed,
        boxes=boxes,
        box_reflectivity=rng.uniform(1e4, 4e4, size=len(boxes)),
        cylinders=cylinders,
        cylinder_reflectivity=rng.uniform(3e4, 1e5, size=len(cylinders)),
        ground=True,
        ground_reflectivity=1.5e4,
        bounds=(-extent, extent, -extent, extent),
        routes=routes,
    )


def generate_world(seed: int, scenario: str) -> WorldModel:
    """Deterministically build a ``tunnel`` or ``forest`` world."""
    if scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {scenario!r}; expected one of {SCENARIOS}")
    rng = rng_stream(seed, _STREAM_WORLD, SCENARIOS.index(scenario))
    if scenario == "tunnel":
        return _tunnel_world(seed, rng)
    return _forest_world(seed, rng)


# ---------------------------------------------------------------- ray casting


def _ray_boxes(o, d, boxes):
    """Entry distance and index of the first box hit by each ray."""
    if len(boxes) == 0:
        return np.full(len(d), np.inf), np.zeros(len(d), dtype=int)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (boxes[None, :, :3] - o) * inv[:, None, :]
        t2 = (boxes[None, :, 3:] - o) * inv[:, None, :]
    # rays parallel to a slab: nan when origin lies on the slab plane
    t1 = np.where(np.isnan(t1), -np.inf, t1)
    t2 = np.where(np.isnan(t2), np.inf, t2)
    tmin = np.minimum(t1, t2).max(axis=2)
    tmax = np.maximum(t1, t2).min(axis=2)
    t = np.where((tmax >= tmin) & (tmin > 1e-6), tmin, np.inf)
    i = t.argmin(axis=1)
    return t[np.arange(len(d)), i], i


def _ray_cylinders(o, d, cyl):
    """Entry distance and index of the first vertical cylinder hit by each ray."""
    if len(cyl) == 0:
        return np.full(len(d), np.inf), np.zeros(len(d), dtype=int)
    oc = o[:2] - cyl[:, :2]
    dxy = d[:, :2]
    a = (dxy**2).sum(axis=1)[:, None]
    b = 2.0 * dxy @ oc.T
    c = (oc**2).sum(axis=1)[None, :] - cyl[:, 2] ** 2
    disc = b * b - 4 * a * c
    with np.errstate(invalid="ignore", divide="ignore"):
        t = (-b - np.sqrt(np.maximum(disc, 0.0))) / (2 * a)
        z = o[2] + t * d[:, 2:3]
    ok = (disc >= 0) & (t > 1e-6) & (z >= cyl[:, 3]) & (z <= cyl[:, 4]) & (c > 0)
    t = np.where(ok, t, np.inf)
    i = t.argmin(axis=1)
    return t[np.arange(len(d)), i], i


def _visible(world, origin, forward_xy, max_range, half_fov):
    """Indices of boxes and cylinders that can intersect the sensor's view cone."""
    cos_lim = np.cos(min(half_fov + np.radians(10.0), np.pi))

    def keep(centres, radii):
        rel = centres - origin[:2]
        dist = np.linalg.norm(rel, axis=1)
        near = dist <= max_range + radii
        close = dist <= radii + 1.0
        with np.errstate(invalid="ignore", divide="ignore"):
            cosang = (rel @ forward_xy) / np.maximum(dist, 1e-9)
        # widen the angular gate by the primitive's angular size
        widen = np.arcsin(np.clip(radii / np.maximum(dist, 1e-9), 0.0, 1.0))
        inside = np.arccos(np.clip(cosang, -1.0, 1.0)) <= np.arccos(cos_lim) + widen
        return np.flatnonzero(near & (inside | close))

    b = world.boxes
    if len(b):
        bc = 0.5 * (b[:, :2] + b[:, 3:5])
        br = 0.5 * np.linalg.norm(b[:, 3:5] - b[:, :2], axis=1)
        ib = keep(bc, br)
    else:
        ib = np.zeros(0, dtype=int)
    c = world.cylinders
    ic = keep(c[:, :2], c[:, 2]) if len(c) else np.zeros(0, dtype=int)
    return ib, ic


def cast_rays(world: WorldModel, origin, directions, cull=None):
    """Nearest hit distance, ground flag and surface reflectivity per ray.

    ``cull`` optionally restricts the primitives tested to ``(box_idx, cyl_idx)``.
    """
    origin = np.asarray(origin, dtype=float)
    if cull is None:
        ib, ic = np.arange(len(world.boxes)), np.arange(len(world.cylinders))
    else:
        ib, ic = cull
    t_box, hb = _ray_boxes(origin, directions, world.boxes[ib])
    t_cyl, hc = _ray_cylinders(origin, directions, world.cylinders[ic])
    if world.ground:
        with np.errstate(divide="ignore"):
            t_gnd = np.where(directions[:, 2] < 0, -origin[2] / directions[:, 2], np.inf)
    else:
        t_gnd = np.full(len(directions), np.inf)
    t_obj = np.minimum(t_box, t_cyl)
    is_ground = t_gnd < t_obj
    t = np.minimum(t_obj, t_gnd)
    refl = np.full(len(directions), world.ground_reflectivity)
    use_box = ~is_ground & (t_box <= t_cyl) & np.isfinite(t_box)
    use_cyl = ~is_ground & (t_cyl < t_box)
    if len(ib):
        refl[use_box] = world.box_reflectivity[ib[hb[use_box]]]
    if len(ic):
        refl[use_cyl] = world.cylinder_reflectivity[ic[hc[use_cyl]]]
    return t, is_ground, refl


def simulate_scan(
    world: WorldModel,
    sensor_pose: Se3Pose,
    ego_velocity,
    sensor: SensorModel,
    rng: np.random.Generator,
    timestamp: float = 0.0,
    imu_orientation=None,
) -> RadarScan:
    """Ray-cast one radar sweep.

    ``ego_velocity`` is the sensor's linear velocity in the world frame.
    Doppler follows ``doppler = -u . v_sensor`` where ``u`` is the unit
    direction to the point in the sensor frame.
    """
    az_lim = np.radians(sensor.azimuth_fov_deg)
    el_lim = np.radians(sensor.elevation_fov_deg)
    n_target = sensor.object_points + sensor.ground_points
    n_rays = max(1, sensor.rays_per_point * n_target)
    az = rng.uniform(-az_lim, az_lim, n_rays)
    el = rng.uniform(-el_lim, el_lim, n_rays)
    dirs_s = np.column_stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    R = sensor_pose.rotation
    dirs_w = dirs_s @ R.T
    forward = R[:2, 0] / max(np.linalg.norm(R[:2, 0]), 1e-12)
    cull = _visible(world, sensor_pose.trans, forward, sensor.max_range, az_lim)
    t, is_ground, refl = cast_rays(world, sensor_pose.trans, dirs_w, cull)
    hit = t <= sensor.max_range

    obj_idx = np.flatnonzero(hit & ~is_ground)[: sensor.object_points]
    gnd_idx = np.flatnonzero(hit & is_ground)[: sensor.ground_points]
    idx = np.sort(np.concatenate([obj_idx, gnd_idx]))
    if sensor.dropout > 0:
        idx = idx[rng.uniform(size=len(idx)) >= sensor.dropout]

    rng_true = t[idx]
    u = dirs_s[idx]
    n = len(idx)
    v_s = R.T @ np.asarray(ego_velocity, dtype=float)
    doppler = -(1.0 + sensor.doppler_scale_error) * (u @ v_s) + rng.normal(0.0, sensor.doppler_sigma, n) if n else np.zeros(0)

    ang_sigma = np.radians(sensor.angle_sigma_deg)
    az_m = az[idx] + rng.normal(0.0, ang_sigma, n)
    el_m = el[idx] + rng.normal(0.0, ang_sigma, n)
    r_m = rng_true + rng.normal(0.0, sensor.range_sigma, n)
    pos = r_m[:, None] * np.column_stack([np.cos(el_m) * np.cos(az_m), np.cos(el_m) * np.sin(az_m), np.sin(el_m)])

    intensity = refl[idx] / np.maximum(rng_true, 0.5) ** 2
    intensity = intensity * np.exp(rng.normal(0.0, sensor.intensity_sigma, n))

    n_out = int(round(sensor.outlier_fraction * n))
    if n_out:
        out = rng.choice(n, size=n_out, replace=False)
        doppler[out] = rng.uniform(-sensor.outlier_doppler, sensor.outlier_doppler, n_out)

    keep = (np.abs(az_m) <= az_lim) & (np.abs(el_m) <= el_lim) & (r_m > 0) & (r_m <= sensor.max_range)
    pts = np.column_stack([pos, intensity, doppler])[keep]
    if imu_orientation is None:
        imu_orientation = sensor_pose.quat
    return RadarScan(pts, timestamp, imu_orientation)


# ---------------------------------------------------------------- paths


@dataclass
class _Line:
    a: np.ndarray
    b: np.ndarray

    @property
    def length(self):
        return float(np.linalg.norm(self.b - self.a))

    def at(self, s):
        d = (self.b - self.a) / self.length
        return self.a + s * d, float(np.arctan2(d[1], d[0]))


@dataclass
class _Arc:
    centre: np.ndarray
    radius: float
    start: float  # angle of start point around centre
    sweep: float  # signed

    @property
    def length(self):
        return abs(self.sweep) * self.radius

    def at(self, s):
        ang = self.start + np.sign(self.sweep) * s / self.radius
        p = self.centre + self.radius * np.array([np.cos(ang), np.sin(ang)])
        heading = ang + np.sign(self.sweep) * np.pi / 2
        return p, float(heading)


def _fillet(points, radius, closed):
    """Polyline with corners replaced by tangent circular arcs."""
    pts = [np.asarray(p, dtype=float) for p in points]
    n = len(pts)
    corners = range(n) if closed else range(1, n - 1)
    trims = {}
    for i in corners:
        p_prev, p, p_next = pts[i - 1], pts[i], pts[(i + 1) % n]
        d0 = (p - p_prev) / np.linalg.norm(p - p_prev)
        d1 = (p_next - p) / np.linalg.norm(p_next - p)
        turn = np.arctan2(d0[0] * d1[1] - d0[1] * d1[0], d0 @ d1)
        if abs(turn) < 1e-12:
            continue
        tlen = radius * np.tan(abs(turn) / 2)
        a = p - d0 * tlen
        b = p + d1 * tlen
        left = np.array([-d0[1], d0[0]]) * np.sign(turn)
        centre = a + left * radius
        start = np.arctan2(*(a - centre)[::-1])
        trims[i] = (a, b, _Arc(centre, radius, start, turn))
    segs = []
    idx = list(range(n)) if closed else list(range(n - 1))
    for i in idx:
        j = (i + 1) % n
        a = trims[i][1] if i in trims else pts[i]
        b = trims[j][0] if j in trims else pts[j]
        if np.linalg.norm(b - a) > 1e-12:
            segs.append(_Line(a, b))
        if j in trims and (closed or j < n - 1):
            segs.append(trims[j][2])
    return segs


def _offset_polyline(points, d):
    """Offset an open polyline by ``d`` to the right of travel."""
    pts = [np.asarray(p, dtype=float) for p in points]
    dirs = [(b - a) / np.linalg.norm(b - a) for a, b in zip(pts[:-1], pts[1:])]
    rights = [np.array([dd[1], -dd[0]]) for dd in dirs]
    out = [pts[0] + d * rights[0]]
    for i in range(1, len(pts) - 1):
        n0, n1 = rights[i - 1], rights[i]
        # intersection of the two offset lines
        m = n0 + n1
        m = m / (1.0 + n0 @ n1)
        out.append(pts[i] + d * m)
    out.append(pts[-1] + d * rights[-1])
    return out


@dataclass
class PathSpec:
    """Route template: ``kind`` is ``loop`` (closed, ``laps`` repetitions)
    or ``out_and_back`` (open route, U-turn, reverse)."""

    waypoints: list
    kind: str = "loop"
    laps: int = 2
    speed: float = 2.5
    turn_radius: float = 3.0
    lane_offset: float = 1.2
    height: float = 0.7

    def __post_init__(self):
        if self.kind not in ("loop", "out_and_back", "line"):
            raise ValueError(f"unknown path kind {self.kind!r}")
        if self.speed <= 0:
            raise ValueError("speed must be positive")


class Path2D:
    def __init__(self, spec: PathSpec):
        self.spec = spec
        wp = [np.asarray(p, dtype=float) for p in spec.waypoints]
        if spec.kind == "loop":
            self.segments = _fillet(wp, spec.turn_radius, closed=True)
            self.lap_length = sum(s.length for s in self.segments)
            self.length = self.lap_length * spec.laps
        elif spec.kind == "line":
            self.segments = _fillet(wp, spec.turn_radius, closed=False)
            self.lap_length = sum(s.length for s in self.segments)
            self.length = self.lap_length
        else:
            d = spec.lane_offset
            out = _offset_polyline(wp, d)
            back = _offset_polyline(wp[::-1], d)
            segs = _fillet(out, spec.turn_radius, closed=False)
            end_dir = (wp[-1] - wp[-2]) / np.linalg.norm(wp[-1] - wp[-2])
            right = np.array([end_dir[1], -end_dir[0]])
            start = np.arctan2(right[1], right[0])
            segs.append(_Arc(wp[-1].copy(), d, start, np.pi))
            segs += _fillet(back, spec.turn_radius, closed=False)
            self.segments = segs
            self.lap_length = sum(s.length for s in segs)
            self.length = self.lap_length
        self._cum = np.concatenate([[0.0], np.cumsum([s.length for s in self.segments])])

    def pose_at(self, s: float) -> tuple[np.ndarray, float]:
        if self.spec.kind == "loop":
            s = s % self.lap_length
        s = min(max(s, 0.0), self._cum[-1])
        i = int(np.searchsorted(self._cum, s, side="right") - 1)
        i = min(i, len(self.segments) - 1)
        return self.segments[i].at(s - self._cum[i])

    def se3_at(self, s: float) -> Se3Pose:
        p, h = self.pose_at(s)
        return Se3Pose.from_xyz_yaw(p[0], p[1], self.spec.height, h)


def fit_speed(path: PathSpec, duration: float) -> PathSpec:
    """Copy of ``path`` with the speed chosen to cover it in ``duration`` seconds."""
    length = Path2D(path).length
    return PathSpec(**{**asdict(path), "speed": length / duration})


def route_path(world: WorldModel, template: str, **kw) -> PathSpec:
    """Path template built on one of the world's routes."""
    kind = "loop" if template in ("loop", "same_direction") else "out_and_back"
    key = "loop" if kind == "loop" else "out_and_back"
    kw.setdefault("lane_offset", world.lane_offset)
    return PathSpec(waypoints=[list(p) for p in world.routes[key]], kind=kind, **kw)


# ---------------------------------------------------------------- sequences


def _imu_error(n, times, imu: ImuModel, rng):
    dt = np.diff(times, prepend=times[0])
    rw = np.radians(imu.random_walk_deg_per_sqrt_s) * np.sqrt(dt)[:, None] * rng.normal(size=(n, 3))
    walk = np.cumsum(rw, axis=0)
    tilt_dir = rng.normal(size=2)
    tilt_dir /= np.linalg.norm(tilt_dir)
    bias = np.array([*(tilt_dir * np.radians(imu.tilt_drift_deg_per_s)), np.radians(imu.yaw_drift_deg_per_s)])
    return times[:, None] * bias[None, :] + walk


def generate_sequence(
    world: WorldModel,
    path: PathSpec,
    sensor: SensorModel,
    rate: float = 10.0,
    seed: int = 0,
    imu: ImuModel | None = None,
    duration: float | None = None,
):
    """Simulate scans along ``path``; returns ``(scans, ground_truth)``."""
    imu = imu or ImuModel()
    p2d = Path2D(path)
    if duration is None:
        duration = p2d.length / path.speed
    n = int(round(duration * rate))
    times = np.arange(n) / rate
    svals = times * path.speed
    samples = np.array([p2d.pose_at(s)[0] for s in svals])
    if not world.contains(samples).all():
        raise ValueError("path leaves world bounds")
    gt = [p2d.se3_at(s) for s in svals]
    err = _imu_error(n, times, imu, rng_stream(seed, _STREAM_IMU))
    scans = []
    for k in range(n):
        pose = gt[k]
        heading = pose.yaw
        vel = path.speed * np.array([np.cos(heading), np.sin(heading), 0.0])
        if p2d.spec.kind != "loop" and svals[k] >= p2d.length:
            vel = np.zeros(3)
        q_imu = (Rotation.from_rotvec(err[k]) * Rotation.from_quat(pose.quat)).as_quat()
        scans.append(simulate_scan(world, pose, vel, sensor, rng_stream(seed, _STREAM_SCAN, k), times[k], q_imu))
    return scans, Trajectory(times, gt)


# ---------------------------------------------------------------- file format


def write_dataset(directory, scans, gt: Trajectory, meta: dict | None = None) -> Path:
    """One CSV per scan plus ``manifest.json`` and ``groundtruth.txt`` (TUM)."""
    directory = Path(directory)
    (directory / "scans").mkdir(parents=True, exist_ok=True)
    entries = []
    for k, (scan, (_, pose)) in enumerate(zip(scans, gt)):
        name = f"scans/scan_{k:06d}.csv"
        write_scan_csv(directory / name, scan.points)
        entries.append(
            {
                "file": name,
                "timestamp": float(scan.timestamp),
                "imu_quaternion": [float(v) for v in scan.imu_orientation],
                "gt_translation": [float(v) for v in pose.trans],
                "gt_quaternion": [float(v) for v in pose.quat],
            }
        )
    manifest = {"scans": entries, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    (directory / "groundtruth.txt").write_text(format_tum(gt))
    return directory


def write_scan_csv(path, points) -> None:
    points = np.asarray(points, dtype=float).reshape(-1, 5)
    lines = ["x,y,z,intensity,doppler"]
    lines += [",".join(repr(float(v)) for v in row) for row in points]
    Path(path).write_text("\n".join(lines) + "\n")


def read_scan_csv(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "x,y,z,intensity,doppler":
        raise ValueError(f"{path}: bad scan header")
    rows = [[float(v) for v in ln.split(",")] for ln in lines[1:] if ln.strip()]
    return np.array(rows, dtype=float).reshape(-1, 5)


def read_dataset(directory):
    """Load scans and ground truth written by :func:`write_dataset`.

    Ground truth is ``None`` when the manifest has no GT poses.
    """
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    scans, stamps, poses = [], [], []
    for e in manifest["scans"]:
        pts = read_scan_csv(directory / e["file"])
        scans.append(RadarScan(pts, e["timestamp"], e["imu_quaternion"]))
        if "gt_translation" in e:
            stamps.append(e["timestamp"])
            poses.append(Se3Pose(e["gt_quaternion"], e["gt_translation"]))
    gt = Trajectory(stamps, poses) if len(poses) == len(scans) else None
    return scans, gt, manifest.get("meta", {})


def sensor_from_dict(d: dict) -> SensorModel:
    return SensorModel(**d)


def sensor_to_dict(s: SensorModel) -> dict:
    return asdict(s)
