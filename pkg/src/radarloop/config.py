"""Pipeline configuration: one declarative YAML document of nested sections."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .alignment import EntropyConfig
from .evaluation import DESK_LENGTHS
from .odometry import RansacConfig
from .place_recognition import RetrievalConfig
from .registration import RegistrationConfig
from .sensor_sim import ImuModel, SensorModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimulationConfig:
    scenario: str = "forest"
    template: str = "loop"
    world_seed: int = 1
    duration: float = 60.0
    rate: float = 10.0
    laps: int = 2
    training_seed_offset: int = 1000


@dataclass(frozen=True)
class KeyframeConfig:
    distance: float = 1.5
    angle_deg: float = 5.0
    submap_keyframes: int = 3
    cell_size: float = 1.0
    min_points: int = 6
    planarity: float = 0.5


@dataclass(frozen=True)
class AlignmentConfig:
    feature_set: str = "cfear"
    l2: float = 1.0
    stride: int = 1
    seed: int = 0
    planar_disturbances: bool = True


@dataclass(frozen=True)
class VerificationConfig:
    threshold: float = 0.9
    l2: float = 1.0
    training_top_k: int = 3
    label: str = "constraint"  # constraint: true revisit with a correct registration | distance: 6 m gate only


@dataclass(frozen=True)
class GraphConfig:
    loop_information: str = "fixed"  # fixed | scaled
    max_iterations: int = 100


@dataclass(frozen=True)
class EvaluationConfig:
    loop_distance: float = 6.0
    overlap_radius: float = 0.5
    overlap_gate: float = 0.2
    lengths: tuple = DESK_LENGTHS
    length_scale: float = 0.2  # desk lengths / KITTI lengths


@dataclass(frozen=True)
class GridConfig:
    descriptor_keyframes: tuple = (1, 5)
    top_k: tuple = (1, 3)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 1
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    sensor: SensorModel = field(default_factory=SensorModel)
    imu: ImuModel = field(default_factory=ImuModel)
    odometry: RansacConfig = field(default_factory=RansacConfig)
    keyframing: KeyframeConfig = field(default_factory=KeyframeConfig)
    registration: RegistrationConfig = field(default_factory=RegistrationConfig)
    entropy: EntropyConfig = field(default_factory=EntropyConfig)
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    pose_graph: GraphConfig = field(default_factory=GraphConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def validate(self) -> "PipelineConfig":
        from .alignment import FEATURE_SETS
        from .sensor_sim import SCENARIOS

        if self.simulation.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.simulation.scenario!r}")
        if self.simulation.template not in ("loop", "out_and_back"):
            raise ConfigError(f"unknown template {self.simulation.template!r}")
        if self.alignment.feature_set not in FEATURE_SETS:
            raise ConfigError(f"unknown feature set {self.alignment.feature_set!r}")
        if not 0 < self.verification.threshold < 1:
            raise ConfigError("verification.threshold must lie in (0, 1)")
        if self.verification.label not in ("constraint", "distance"):
            raise ConfigError("verification.label must be constraint or distance")
        if self.pose_graph.loop_information not in ("fixed", "scaled"):
            raise ConfigError("pose_graph.loop_information must be fixed or scaled")
        if min(self.grid.descriptor_keyframes) < 1 or min(self.grid.top_k) < 1:
            raise ConfigError("grid values must be >= 1")
        return self

    def retrieval_for(self, k: int, top_k: int) -> RetrievalConfig:
        return dataclasses.replace(self.retrieval, descriptor_keyframes=k, top_k=top_k)


def _build(cls, data, where=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'config'}: {', '.join(unknown)}")
    defaults = cls()
    kw = {}
    for name, value in data.items():
        default = getattr(defaults, name)
        key = f"{where}.{name}" if where else name
        if dataclasses.is_dataclass(default):
            kw[name] = _build(type(default), value, key)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{key}: expected a list")
            kw[name] = tuple(value)
        elif isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(f"{key}: expected true/false")
            kw[name] = value
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{key}: expected a number")
            kw[name] = float(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{key}: expected an integer")
            kw[name] = value
        else:
            kw[name] = value
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from exc


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_plain(v) for v in obj]
    return obj


def config_from_dict(data: dict | None) -> PipelineConfig:
    return _build(PipelineConfig, data or {}).validate()


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _plain(cfg)


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)


def parse_config(text: str) -> PipelineConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    return config_from_dict(data)


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def save_config(path, cfg: PipelineConfig) -> None:
    Path(path).write_text(dump_config(cfg))


def apply_overrides(cfg: PipelineConfig, overrides) -> PipelineConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = config_to_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node = data
        parts = key.strip().split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown section {p!r} in override {item!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key {key!r}")
        node[parts[-1]] = yaml.safe_load(raw)
    return config_from_dict(data)
