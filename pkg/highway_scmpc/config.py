"""
Experiment configuration.

A single JSON document configures a run. Every design parameter of the controller and
the predictor is a named key with a working default, so an empty document is a valid
(empty-road) configuration apart from the scene. Unknown keys are rejected.

Usage:
    from highway_scmpc.config import load_config
    cfg = load_config('configs/case1.json')
    cfg.controller.N, cfg.filter.T

Environment (loaded from .flaskenv by run.py):
    SCMPC_CONFIG   default config path for the CLI and the HTTP service
    SCMPC_OUT_DIR  default output directory
    SCMPC_SEED     default seed
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

from highway_scmpc.core_types import CommonState, LaneGeometry, PolicyMode, VehicleParams
from highway_scmpc.errors import ConfigError, ScmpcError

SCHEMA_VERSION = 1

TV_BEHAVIORS = ('constant-velocity', 'brake', 'policy')
DK_MATRIX_VARIANTS = ('as-printed', 'symmetric-k1')


@dataclass
class LaneConfig:
    centerlines: List[float] = field(default_factory=lambda: [22.98, 26.88, 31.3])
    l_lb: float = 21.0
    l_ub: float = 33.8

    def geometry(self) -> LaneGeometry:
        return LaneGeometry(tuple(self.centerlines), self.l_lb, self.l_ub)


@dataclass
class GainConfig:
    """Feedback gains of the policy models; a `None` gain is synthesized from the weights."""

    k_lon_vt: Optional[List[float]] = None
    k_lon_dk: Optional[List[float]] = None
    k_lat: Optional[List[float]] = field(default_factory=lambda: [1.15, 3.39, 3.58])
    lon_state_weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    lon_input_weight: float = 10.0
    lat_state_weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    lat_input_weight: float = 10.0
    # 'as-printed' (K2 in the a-row) has no stationary following gap
    dk_matrix: str = 'symmetric-k1'


@dataclass
class FilterConfig:
    T: float = 0.04
    self_transition: float = 0.925
    transition_matrix: Optional[List[List[float]]] = None
    # diagonal Q per filter step, ordered [p, v, a, r, p_lat, v_lat, a_lat]
    process_noise: List[float] = field(
        default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-3, 1e-4, 1e-3, 1e-2])
    process_noise_r_dk: float = 1e-4
    measurement_noise: List[float] = field(
        default_factory=lambda: [0.01, 0.04, 0.25, 0.04, 0.01, 0.04, 0.25])
    measurement_noise_r_dk: float = 0.01
    initial_covariance: List[float] = field(
        default_factory=lambda: [1.0, 0.5, 0.5, 1.0, 0.25, 0.1, 0.1])
    mu_floor: float = 1e-6
    projection_tau: float = 0.0
    projection_margin: float = 0.0
    projection_weights: List[float] = field(default_factory=lambda: [1.0, 1.0, 1.0])
    projection_big_m: float = 1e4
    projection_rho: float = 1.0
    projection_eps: float = 1e-6
    virtual_lv_distance: float = 500.0


@dataclass
class ScenarioConfig:
    p_threshold: float = 0.05
    max_scenarios: int = 4096
    a_min_lv: float = -3.0


@dataclass
class ControllerConfig:
    N: int = 15
    Tp: float = 0.4
    q_bar: List[float] = field(default_factory=lambda: [0.0, 1.0, 1.0, 10.0, 1.0, 1.0])
    r_bar: List[float] = field(default_factory=lambda: [0.1, 0.1])
    a_lon_min: float = -4.0
    a_lon_max: float = 4.0
    a_lat_min: float = -4.0
    a_lat_max: float = 4.0
    j_lon_min: float = -5.0
    j_lon_max: float = 5.0
    j_lat_min: float = -4.0
    j_lat_max: float = 4.0
    tau: float = 0.4
    safety_margin: float = 0.0
    cost_sentinel: float = 5000.0
    lane_change_targets: Optional[List[int]] = None
    v_max: Optional[float] = None
    auto_horizon: bool = True
    worst_input_weight: float = 1e-3
    worst_lateral_weight: float = 1.0
    occupancy_margin: float = 0.1
    max_iter: int = 2000
    # opt-in: an infeasible mode is re-solved without the nominal scenario gaps
    relax_nominal_safety: bool = False


@dataclass
class SimulationConfig:
    Ts: float = 10.0
    seed: int = 0
    dataset: Optional[str] = None
    ego_id: Optional[int] = None
    start_frame: Optional[int] = None
    x_scale: float = 1.0
    x_offset: float = 0.0
    y_scale: float = 1.0
    y_offset: float = 0.0
    add_measurement_noise: bool = False
    verify_feasibility: bool = False


@dataclass
class VehicleSpec:
    id: int
    state: List[float]
    length: float
    width: float
    behavior: str = 'constant-velocity'
    brake_time: Optional[float] = None
    mode: Optional[str] = None
    r_ref: Optional[float] = None

    def params(self) -> VehicleParams:
        return VehicleParams(self.id, self.length, self.width)

    def initial_state(self) -> CommonState:
        return CommonState.from_array(self.state)


@dataclass
class SceneConfig:
    ego: VehicleSpec
    targets: List[VehicleSpec] = field(default_factory=list)


@dataclass
class ExperimentConfig:
    name: str = 'experiment'
    schema_version: int = SCHEMA_VERSION
    simulation: SimulationConfig = field(default_factory=SimulationConfig)
    lanes: LaneConfig = field(default_factory=LaneConfig)
    gains: GainConfig = field(default_factory=GainConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    scenarios: ScenarioConfig = field(default_factory=ScenarioConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    scene: Optional[SceneConfig] = None

    @property
    def stride(self) -> int:
        """Filter ticks per control step."""
        return int(round(self.controller.Tp / self.filter.T))

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


_SECTIONS = {
    'simulation': SimulationConfig,
    'lanes': LaneConfig,
    'gains': GainConfig,
    'filter': FilterConfig,
    'scenarios': ScenarioConfig,
    'controller': ControllerConfig,
}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f'{path} must be an object', key=path)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f'unknown keys in {path}: {", ".join(unknown)}', key=path)
    try:
        return cls(**data)
    except TypeError as e:
        raise ConfigError(f'{path}: {e}', key=path)


def _build_scene(data):
    if not isinstance(data, dict) or 'ego' not in data:
        raise ConfigError('scene needs an "ego" vehicle', key='scene')
    unknown = sorted(set(data) - {'ego', 'targets'})
    if unknown:
        raise ConfigError(f'unknown keys in scene: {", ".join(unknown)}', key='scene')
    ego = _build(VehicleSpec, data['ego'], 'scene.ego')
    targets = [_build(VehicleSpec, t, f'scene.targets[{i}]')
               for i, t in enumerate(data.get('targets', []))]
    return SceneConfig(ego=ego, targets=targets)


def config_from_dict(data: Dict[str, Any], base_dir: Optional[Path] = None) -> ExperimentConfig:
    """Build and validate an ExperimentConfig from a parsed JSON document."""
    if not isinstance(data, dict):
        raise ConfigError('configuration must be a JSON object')
    top = {f.name for f in fields(ExperimentConfig)}
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f'unknown top-level keys: {", ".join(unknown)}')

    kwargs: Dict[str, Any] = {}
    for key in ('name', 'schema_version'):
        if key in data:
            kwargs[key] = data[key]
    for key, cls in _SECTIONS.items():
        if key in data:
            kwargs[key] = _build(cls, data[key], key)
    if data.get('scene') is not None:
        kwargs['scene'] = _build_scene(data['scene'])

    cfg = ExperimentConfig(**kwargs)
    dataset = cfg.simulation.dataset
    if dataset and base_dir is not None and not os.path.isabs(dataset):
        cfg.simulation.dataset = str((base_dir / dataset).resolve())
    validate_config(cfg)
    return cfg


def load_config(source: Union[str, Path, Dict[str, Any]]) -> ExperimentConfig:
    """
    Load a configuration from a JSON file path or an already-parsed dict.

    Relative dataset paths are resolved against the config file's directory.
    """
    if isinstance(source, dict):
        return config_from_dict(source)
    path = Path(source)
    try:
        with open(path, 'r') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f'config file not found: {path}')
    except json.JSONDecodeError as e:
        raise ConfigError(f'{path}: invalid JSON at line {e.lineno}: {e.msg}')
    return config_from_dict(data, base_dir=path.parent)


def apply_env_overrides(cfg: ExperimentConfig) -> ExperimentConfig:
    seed = os.environ.get('SCMPC_SEED')
    if seed:
        try:
            cfg.simulation.seed = int(seed)
        except ValueError:
            raise ConfigError(f'SCMPC_SEED must be an integer, got {seed!r}')
    return cfg


def _require(condition, message, key=None):
    if not condition:
        raise ConfigError(message, key=key)


def _ordered(lo, hi, name):
    _require(lo < hi, f'{name}: min {lo} must be below max {hi}', key=name)


def validate_config(cfg: ExperimentConfig) -> ExperimentConfig:
    _require(cfg.schema_version == SCHEMA_VERSION,
             f'unsupported schema_version {cfg.schema_version}', 'schema_version')

    try:
        cfg.lanes.geometry()
    except ScmpcError as e:
        raise ConfigError(f'lanes: {e.detail}', key='lanes')

    f, c, s, g, sim = cfg.filter, cfg.controller, cfg.scenarios, cfg.gains, cfg.simulation
    _require(f.T > 0 and c.Tp > 0, 'sampling times must be positive', 'filter.T')
    ratio = c.Tp / f.T
    _require(abs(ratio - round(ratio)) < 1e-9 and round(ratio) >= 1,
             f'controller.Tp / filter.T must be a positive integer, got {ratio:.6f}',
             'controller.Tp')
    _require(sim.Ts > 0, 'simulation.Ts must be positive', 'simulation.Ts')

    _require(isinstance(c.N, int) and c.N >= 1, 'controller.N must be a positive integer',
             'controller.N')
    _ordered(c.a_lon_min, c.a_lon_max, 'controller.a_lon')
    _ordered(c.a_lat_min, c.a_lat_max, 'controller.a_lat')
    _ordered(c.j_lon_min, c.j_lon_max, 'controller.j_lon')
    _ordered(c.j_lat_min, c.j_lat_max, 'controller.j_lat')
    _require(c.a_lon_min < 0 < c.a_lon_max, 'controller.a_lon bounds must straddle 0',
             'controller.a_lon')
    _require(c.j_lon_min <= 0 <= c.j_lon_max and c.j_lat_min <= 0 <= c.j_lat_max,
             'jerk bounds must contain zero', 'controller.j_lon')
    _require(len(c.q_bar) == 6 and all(q >= 0 for q in c.q_bar),
             'controller.q_bar needs 6 non-negative entries', 'controller.q_bar')
    _require(len(c.r_bar) == 2 and all(r > 0 for r in c.r_bar),
             'controller.r_bar needs 2 positive entries', 'controller.r_bar')
    _require(c.tau >= 0 and c.safety_margin >= 0, 'tau and safety_margin must be >= 0',
             'controller.tau')
    _require(c.worst_input_weight > 0, 'controller.worst_input_weight must be positive',
             'controller.worst_input_weight')
    if c.lane_change_targets is not None:
        _require(all(t in (1, 2, 3) for t in c.lane_change_targets),
                 'controller.lane_change_targets must list lanes 1-3',
                 'controller.lane_change_targets')

    _require(0.0 <= s.p_threshold < 1.0, 'scenarios.p_threshold must be in [0, 1)',
             'scenarios.p_threshold')
    _require(s.max_scenarios >= 1, 'scenarios.max_scenarios must be >= 1',
             'scenarios.max_scenarios')
    _require(s.a_min_lv < 0, 'scenarios.a_min_lv must be negative', 'scenarios.a_min_lv')

    _require(0.0 < f.self_transition <= 1.0, 'filter.self_transition must be in (0, 1]',
             'filter.self_transition')
    for name in ('process_noise', 'measurement_noise', 'initial_covariance'):
        values = getattr(f, name)
        _require(len(values) == 7 and all(v >= 0 for v in values),
                 f'filter.{name} needs 7 non-negative entries', f'filter.{name}')
    _require(all(v > 0 for v in f.measurement_noise) and f.measurement_noise_r_dk > 0,
             'filter.measurement_noise must be positive definite', 'filter.measurement_noise')
    _require(len(f.projection_weights) == 3 and all(w > 0 for w in f.projection_weights),
             'filter.projection_weights needs 3 positive entries', 'filter.projection_weights')
    _require(f.virtual_lv_distance > 0, 'filter.virtual_lv_distance must be positive',
             'filter.virtual_lv_distance')

    _require(g.dk_matrix in DK_MATRIX_VARIANTS,
             f'gains.dk_matrix must be one of {DK_MATRIX_VARIANTS}', 'gains.dk_matrix')
    for name in ('k_lon_vt', 'k_lon_dk', 'k_lat'):
        gain = getattr(g, name)
        _require(gain is None or (len(gain) == 3 and all(math.isfinite(k) for k in gain)),
                 f'gains.{name} needs 3 finite entries', f'gains.{name}')
    _require(g.lon_input_weight > 0 and g.lat_input_weight > 0,
             'gain input weights must be positive', 'gains.lon_input_weight')

    _require(bool(sim.dataset) != (cfg.scene is not None),
             'exactly one of simulation.dataset or scene is required', 'scene')
    if sim.dataset:
        _require(sim.ego_id is not None and sim.start_frame is not None,
                 'dataset runs need simulation.ego_id and simulation.start_frame',
                 'simulation.ego_id')
    if cfg.scene is not None:
        specs = [cfg.scene.ego] + list(cfg.scene.targets)
        ids = [spec.id for spec in specs]
        _require(len(ids) == len(set(ids)), 'scene vehicle ids must be unique', 'scene')
        for spec in specs:
            _require(len(spec.state) == 6, f'vehicle {spec.id}: state needs 6 entries', 'scene')
            _require(spec.length > 0 and spec.width > 0,
                     f'vehicle {spec.id}: length and width must be positive', 'scene')
            _require(spec.state[1] >= 0, f'vehicle {spec.id}: v_lon must be >= 0', 'scene')
            _require(spec.behavior in TV_BEHAVIORS,
                     f'vehicle {spec.id}: behavior must be one of {TV_BEHAVIORS}', 'scene')
            if spec.behavior == 'brake':
                _require(spec.brake_time is not None,
                         f'vehicle {spec.id}: brake behavior needs brake_time', 'scene')
            if spec.behavior == 'policy':
                try:
                    PolicyMode.from_label(spec.mode or '')
                except (ValueError, ScmpcError):
                    raise ConfigError(f'vehicle {spec.id}: policy behavior needs a mode '
                                      f'such as "VT-2"', key='scene')
    return cfg
