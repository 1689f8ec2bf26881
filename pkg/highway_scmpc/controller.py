"""
Scenario-based MPC for the ego vehicle.

Each control mode (lane keeping, or a change into an adjacent lane) gets one condensed QP
over two input branches sharing their first input: a nominal branch that tracks the mode's
reference while keeping the time-gap distance to every vehicle of every retained scenario,
and a worst-case branch that must reach standstill at the target centerline while staying
behind lead vehicles braking at their minimum acceleration. The mode with the lowest
nominal cost is executed.

Usage:
    controller = ScenarioController(cfg.controller, lanes, ego_params, a_min_lv=-3.0)
    decision = controller.step(scene, scenarios)
    decision.u0, decision.mode
"""

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from highway_scmpc.config import ControllerConfig
from highway_scmpc.core_types import (
    LANE_KEEP, CommonState, ControlMode, LaneGeometry, SceneSnapshot, VehicleParams,
    jerk_matrices, safety_offset,
)
from highway_scmpc.errors import ConfigError, LaneError
from highway_scmpc.qp import QpProblem, QpSolution, QpStatus, solve_qp
from highway_scmpc.scenarios import Scenario, WorstCaseScenario, build_worst_case
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)

NOMINAL, WORST = 0, 1
LON, LAT = 0, 1
P, V, A = 0, 1, 2


def minimal_stopping_horizon(v0: float, a_min: float, Tp: float) -> int:
    """Steps needed to brake from v0 to standstill at a_min: ceil(v0 / (|a_min| Tp))."""
    if v0 < 0.0 or a_min >= 0.0 or Tp <= 0.0:
        raise ConfigError(f'stopping horizon needs v0 >= 0, a_min < 0, Tp > 0 '
                          f'(got {v0}, {a_min}, {Tp})')
    return int(math.ceil(v0 / (abs(a_min) * Tp) - 1e-9))


def required_horizon(v_envelope: float, cfg: ControllerConfig) -> int:
    """Stopping horizon plus the jerk-limited ramps into and out of full braking."""
    ramp_in = math.ceil(abs(cfg.a_lon_min) / (abs(cfg.j_lon_min) * cfg.Tp) - 1e-9)
    ramp_out = math.ceil(abs(cfg.a_lon_min) / (cfg.j_lon_max * cfg.Tp) - 1e-9)
    return minimal_stopping_horizon(v_envelope, cfg.a_lon_min, cfg.Tp) + ramp_in + ramp_out + 1


def required_gap(v: float, tau: float, delta_d: float) -> float:
    return tau * v + delta_d


@dataclass(frozen=True)
class ReferenceTrajectory:
    mode: ControlMode
    states: np.ndarray  # rows k = 1..N of [p, v, a, p_lat, v_lat, a_lat]

    @property
    def lateral_target(self) -> float:
        return float(self.states[0, 3])


def build_reference(mode: ControlMode, current: CommonState, lanes: LaneGeometry, N: int,
                    Tp: float) -> ReferenceTrajectory:
    """
    Constant-velocity longitudinal ramp; lateral reference at the current lane's centerline
    (lane keeping) or the target lane's centerline (lane change).

    Raises:
        LaneError: the target lane is not adjacent to the current lane
    """
    lane = lanes.lane_of(current.p_lat)
    if mode.lane_change and mode.target_lane not in lanes.adjacent(lane):
        raise LaneError(f'lane change {lane} -> {mode.target_lane} is not to an adjacent lane')
    center = lanes.centerline(mode.terminal_lane(lane))
    k = np.arange(1, N + 1)
    states = np.zeros((N, 6))
    states[:, 0] = current.p_lon + current.v_lon * k * Tp
    states[:, 1] = current.v_lon
    states[:, 3] = center
    return ReferenceTrajectory(mode, states)


class _Layout:
    """Variable ordering: branch-major, then step, then axis (lon, lat)."""

    def __init__(self, N: int, axes: Tuple[int, ...] = (LON, LAT)):
        self.N = N
        self.axes = axes
        self.n = 2 * N * len(axes)

    def index(self, branch: int, step: int, axis: int) -> int:
        return (branch * self.N + step) * len(self.axes) + self.axes.index(axis)

    def columns(self, branch: int, axis: int) -> List[int]:
        return [self.index(branch, i, axis) for i in range(self.N)]


def prediction_matrices(N: int, Tp: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Condensed per-axis jerk model: X = Phi x0 + G U, X stacking [p, v, a] for k = 1..N.
    """
    A_, B_ = jerk_matrices(Tp)
    powers = [np.eye(3)]
    for _ in range(N):
        powers.append(A_ @ powers[-1])
    Phi = np.vstack(powers[1:])
    G = np.zeros((3 * N, N))
    for k in range(1, N + 1):
        for i in range(k):
            G[3 * (k - 1):3 * k, i] = powers[k - 1 - i] @ B_
    return Phi, G


@dataclass
class Schedule:
    """Lanes a branch's footprint may touch per step k = 1..N, with the matching lateral
    corridor for the vehicle center."""

    lanes: List[Tuple[int, ...]]
    lower: np.ndarray
    upper: np.ndarray


def occupancy_schedule(p_lat: Sequence[float], lanes: LaneGeometry, half_width: float,
                       margin: float) -> Schedule:
    occupied, lower, upper = [], [], []
    for y in p_lat:
        touched = lanes.lanes_overlapped(float(y), half_width + margin)
        occupied.append(touched)
        lower.append(lanes.span(min(touched))[0] + half_width)
        upper.append(lanes.span(max(touched))[1] - half_width)
    return Schedule(occupied, np.array(lower), np.array(upper))


@dataclass
class Cftocp:
    """Assembled joint problem of one control mode, with row tags for diagnostics."""

    mode: ControlMode
    problem: QpProblem
    layout: _Layout
    x0: np.ndarray
    Phi: np.ndarray
    G: np.ndarray
    reference: ReferenceTrajectory
    schedules: Tuple[Schedule, Schedule]
    ineq_tags: List[str] = field(default_factory=list)
    eq_tags: List[str] = field(default_factory=list)
    Q: np.ndarray = field(default_factory=lambda: np.zeros(6))
    R: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @property
    def N(self) -> int:
        return self.layout.N

    def inputs(self, z: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        N = self.N
        return z[:2 * N].reshape(N, 2), z[2 * N:].reshape(N, 2)

    def states(self, z: np.ndarray, branch: int) -> np.ndarray:
        out = np.zeros((self.N + 1, 6))
        out[0] = self.x0
        for axis in (LON, LAT):
            U = z[self.layout.columns(branch, axis)]
            X = self.Phi @ self.x0[3 * axis:3 * axis + 3] + self.G @ U
            out[1:, 3 * axis:3 * axis + 3] = X.reshape(self.N, 3)
        return out

    def nominal_cost(self, z: np.ndarray) -> float:
        X = self.states(z, NOMINAL)[1:]
        U, _ = self.inputs(z)
        err = X - self.reference.states
        return float(np.sum(err * err * self.Q) + np.sum(U * U * self.R))

    def violations(self, z: np.ndarray) -> Dict[str, float]:
        """Largest violation per constraint tag (bounds under 'bounds')."""
        p = self.problem
        out: Dict[str, float] = {}
        if p.A_ineq.shape[0]:
            slack = p.A_ineq @ z - p.b_ineq
            for tag, value in zip(self.ineq_tags, slack):
                out[tag] = max(out.get(tag, 0.0), float(value))
        if p.A_eq.shape[0]:
            residual = np.abs(p.A_eq @ z - p.b_eq)
            for tag, value in zip(self.eq_tags, residual):
                out[tag] = max(out.get(tag, 0.0), float(value))
        out['bounds'] = float(max(np.max(z - p.upper), np.max(p.lower - z), 0.0))
        return out


def _axis_block(layout: _Layout, Phi, G, x0_axis, branch, axis):
    M = np.zeros((3 * layout.N, layout.n))
    M[:, layout.columns(branch, axis)] = G
    return M, Phi @ x0_axis


def _lateral_cost(layout, Phi, G, x0, cfg, ref, branch, H, g, weight):
    M, c = _axis_block(layout, Phi, G, x0[3:], branch, LAT)
    W = np.kron(np.eye(layout.N), np.diag(cfg.q_bar[3:])) * weight
    target = ref.states[:, 3:].ravel()
    H += 2.0 * M.T @ W @ M
    g += 2.0 * M.T @ W @ (c - target)


def plan_lateral(mode: ControlMode, x0: CommonState, ref: ReferenceTrajectory,
                 cfg: ControllerConfig, lanes: LaneGeometry, half_width: float, N: int,
                 Phi: np.ndarray, G: np.ndarray) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """
    Lateral-only problem of both branches (shared first input, terminal rest at the target
    centerline on the worst branch). Returns the planned p_lat per branch for k = 1..N.
    """
    layout = _Layout(N, axes=(LAT,))
    x = x0.as_array()
    H = np.zeros((layout.n, layout.n))
    g = np.zeros(layout.n)
    _lateral_cost(layout, Phi, G, x, cfg, ref, NOMINAL, H, g, 1.0)
    _lateral_cost(layout, Phi, G, x, cfg, ref, WORST, H, g, cfg.worst_lateral_weight)
    for branch, weight in ((NOMINAL, 1.0), (WORST, cfg.worst_input_weight)):
        for col in layout.columns(branch, LAT):
            H[col, col] += 2.0 * weight * cfg.r_bar[1]

    rows, rhs = [], []
    for branch in (NOMINAL, WORST):
        M, c = _axis_block(layout, Phi, G, x[3:], branch, LAT)
        for k in range(N):
            for sign, idx, bound in ((1, A, cfg.a_lat_max), (-1, A, -cfg.a_lat_min),
                                     (1, P, lanes.l_ub - half_width),
                                     (-1, P, -(lanes.l_lb + half_width))):
                rows.append(sign * M[3 * k + idx])
                rhs.append(bound - sign * c[3 * k + idx])
    A_eq, b_eq = [], []
    first = np.zeros(layout.n)
    first[layout.index(NOMINAL, 0, LAT)] = 1.0
    first[layout.index(WORST, 0, LAT)] = -1.0
    A_eq.append(first)
    b_eq.append(0.0)
    M, c = _axis_block(layout, Phi, G, x[3:], WORST, LAT)
    for idx, value in ((P, ref.lateral_target), (V, 0.0), (A, 0.0)):
        A_eq.append(M[3 * (N - 1) + idx])
        b_eq.append(value - c[3 * (N - 1) + idx])
    lower = np.full(layout.n, cfg.j_lat_min)
    upper = np.full(layout.n, cfg.j_lat_max)
    sol = solve_qp(QpProblem(H, g, np.array(A_eq), np.array(b_eq), np.array(rows),
                             np.array(rhs), lower, upper), max_iter=cfg.max_iter)
    if not sol.optimal:
        return None
    paths = []
    for branch in (NOMINAL, WORST):
        M, c = _axis_block(layout, Phi, G, x[3:], branch, LAT)
        paths.append((M @ sol.x + c)[P::3])
    return paths[0], paths[1]


def assemble_cftocp(mode: ControlMode, x0: CommonState, scenarios: Sequence[Scenario],
                    worst: WorstCaseScenario, ref: ReferenceTrajectory, cfg: ControllerConfig,
                    lanes: LaneGeometry, ego: VehicleParams, schedules: Tuple[Schedule, Schedule],
                    target_params: Dict[int, VehicleParams], N: int,
                    include_nominal_safety: bool = True,
                    matrices: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Cftocp:
    """
    Joint condensed QP over [u_0..u_{N-1}, u'_0..u'_{N-1}] (jerk pairs, nominal then worst).

    Constraints: acceleration, velocity and corridor boxes per branch; input bounds; equal
    first inputs; worst-branch terminal standstill at the target centerline; nominal gaps
    p + tau v <= p_v - dd against every retained scenario's vehicles in occupied lanes (plus
    rear vehicles in the target lane for a lane change); worst-branch gaps p + dd <= p_lead
    against the braking leads.
    """
    Phi, G = matrices if matrices is not None else prediction_matrices(N, cfg.Tp)
    layout = _Layout(N)
    x = x0.as_array()
    n = layout.n
    Q = np.asarray(cfg.q_bar, dtype=float)
    R = np.asarray(cfg.r_bar, dtype=float)

    H = np.zeros((n, n))
    g = np.zeros(n)
    for axis in (LON, LAT):
        M, c = _axis_block(layout, Phi, G, x[3 * axis:3 * axis + 3], NOMINAL, axis)
        W = np.kron(np.eye(N), np.diag(Q[3 * axis:3 * axis + 3]))
        target = ref.states[:, 3 * axis:3 * axis + 3].ravel()
        H += 2.0 * M.T @ W @ M
        g += 2.0 * M.T @ W @ (c - target)
    _lateral_cost(layout, Phi, G, x, cfg, ref, WORST, H, g, cfg.worst_lateral_weight)
    for axis in (LON, LAT):
        for col in layout.columns(NOMINAL, axis):
            H[col, col] += 2.0 * R[axis]
        for col in layout.columns(WORST, axis):
            H[col, col] += 2.0 * cfg.worst_input_weight * R[axis]

    rows: List[np.ndarray] = []
    rhs: List[float] = []
    tags: List[str] = []

    def add(row, bound, tag):
        rows.append(row)
        rhs.append(bound)
        tags.append(tag)

    blocks = {}
    for branch in (NOMINAL, WORST):
        name = 'nominal' if branch == NOMINAL else 'worst'
        lon, c_lon = _axis_block(layout, Phi, G, x[:3], branch, LON)
        lat, c_lat = _axis_block(layout, Phi, G, x[3:], branch, LAT)
        blocks[branch] = (lon, c_lon)
        sched = schedules[branch]
        for k in range(N):
            r = 3 * k
            add(lon[r + A], cfg.a_lon_max - c_lon[r + A], f'box-{name}')
            add(-lon[r + A], -cfg.a_lon_min + c_lon[r + A], f'box-{name}')
            add(-lon[r + V], c_lon[r + V], f'box-{name}')
            if cfg.v_max is not None:
                add(lon[r + V], cfg.v_max - c_lon[r + V], f'box-{name}')
            add(lat[r + A], cfg.a_lat_max - c_lat[r + A], f'box-{name}')
            add(-lat[r + A], -cfg.a_lat_min + c_lat[r + A], f'box-{name}')
            add(lat[r + P], sched.upper[k] - c_lat[r + P], f'corridor-{name}')
            add(-lat[r + P], -sched.lower[k] + c_lat[r + P], f'corridor-{name}')

    lon, c_lon = blocks[NOMINAL]
    if include_nominal_safety:
        current_lane = lanes.lane_of(x0.p_lat)
        for k in range(N):
            occupied = schedules[NOMINAL].lanes[k]
            front = math.inf
            rear = -math.inf
            for scenario in scenarios:
                for vid, traj in scenario.trajectories.items():
                    try:
                        lane = lanes.lane_of(traj[k + 1, 3])
                    except LaneError:
                        continue
                    if lane not in occupied:
                        continue
                    dd = safety_offset(ego.length, target_params[vid].length, cfg.safety_margin)
                    if traj[0, 0] > x0.p_lon:
                        front = min(front, traj[k + 1, 0] - dd)
                    elif mode.lane_change and lane == mode.target_lane \
                            and lane != current_lane:
                        rear = max(rear, traj[k + 1, 0] + cfg.tau * traj[k + 1, 1] + dd)
            r = 3 * k
            if math.isfinite(front):
                add(lon[r + P] + cfg.tau * lon[r + V],
                    front - c_lon[r + P] - cfg.tau * c_lon[r + V], 'safety-nominal')
            if math.isfinite(rear):
                add(-lon[r + P], -rear + c_lon[r + P], 'rear-nominal')

    lon_w, c_w = blocks[WORST]
    for k in range(N):
        limit = math.inf
        for lane in schedules[WORST].lanes[k]:
            lead = worst.lead_in(lane)
            if lead is None:
                continue
            dd = safety_offset(ego.length, lead.length, cfg.safety_margin)
            limit = min(limit, lead.trajectory[k + 1, 0] - dd)
        if math.isfinite(limit):
            add(lon_w[3 * k + P], limit - c_w[3 * k + P], 'safety-worst')

    A_eq, b_eq, eq_tags = [], [], []
    for axis in (LON, LAT):
        row = np.zeros(n)
        row[layout.index(NOMINAL, 0, axis)] = 1.0
        row[layout.index(WORST, 0, axis)] = -1.0
        A_eq.append(row)
        b_eq.append(0.0)
        eq_tags.append('first-input')
    lat_w, c_lat_w = _axis_block(layout, Phi, G, x[3:], WORST, LAT)
    last = 3 * (N - 1)
    for block, offset, idx, value in ((lon_w, c_w, V, 0.0), (lon_w, c_w, A, 0.0),
                                      (lat_w, c_lat_w, P, ref.lateral_target),
                                      (lat_w, c_lat_w, V, 0.0), (lat_w, c_lat_w, A, 0.0)):
        A_eq.append(block[last + idx])
        b_eq.append(value - offset[last + idx])
        eq_tags.append('terminal')

    lower = np.empty(n)
    upper = np.empty(n)
    for branch in (NOMINAL, WORST):
        lower[layout.columns(branch, LON)] = cfg.j_lon_min
        upper[layout.columns(branch, LON)] = cfg.j_lon_max
        lower[layout.columns(branch, LAT)] = cfg.j_lat_min
        upper[layout.columns(branch, LAT)] = cfg.j_lat_max

    problem = QpProblem(H, g, np.array(A_eq), np.array(b_eq), np.array(rows), np.array(rhs),
                        lower, upper)
    return Cftocp(mode=mode, problem=problem, layout=layout, x0=x, Phi=Phi, G=G,
                  reference=ref, schedules=schedules, ineq_tags=tags, eq_tags=eq_tags,
                  Q=Q, R=R)


@dataclass
class ControlSolution:
    mode: ControlMode
    feasible: bool
    cost: float = math.inf
    u_nominal: Optional[np.ndarray] = None
    u_worst: Optional[np.ndarray] = None
    nominal_states: Optional[np.ndarray] = None
    worst_states: Optional[np.ndarray] = None
    relaxed: bool = False
    deactivated: bool = False
    status: str = 'infeasible'
    iterations: int = 0
    active_constraints: int = 0
    qp: Optional[QpSolution] = None

    def logged_cost(self, sentinel: float) -> float:
        return self.cost if self.feasible else sentinel


@dataclass
class ControlDecision:
    mode: ControlMode
    u0: np.ndarray
    solution: Optional[ControlSolution]
    emergency: bool = False


def decide(solutions: Sequence[ControlSolution]) -> Optional[ControlSolution]:
    """
    Cheapest feasible mode; fully constrained solutions before relaxed ones. Costs equal
    within 1e-9 (relative) prefer lane keeping, then the lower target lane.
    """
    for relaxed in (False, True):
        pool = [s for s in solutions if s.feasible and s.relaxed == relaxed]
        if not pool:
            continue
        best_cost = min(s.cost for s in pool)
        tied = [s for s in pool if s.cost <= best_cost + 1e-9 * max(1.0, abs(best_cost))]
        tied.sort(key=lambda s: (s.mode.lane_change, s.mode.target_lane or 0))
        return tied[0]
    return None


def emergency_input(x0: CommonState, cfg: ControllerConfig) -> np.ndarray:
    """Full braking toward a_min with the lateral acceleration driven to zero."""
    j_lon = float(np.clip((cfg.a_lon_min - x0.a_lon) / cfg.Tp, cfg.j_lon_min, cfg.j_lon_max))
    j_lat = float(np.clip(-x0.a_lat / cfg.Tp, cfg.j_lat_min, cfg.j_lat_max))
    return np.array([j_lon, j_lat])


class ScenarioController:
    """
    Receding-horizon controller holding per-mode warm starts and the last executed plan.
    """

    def __init__(self, cfg: ControllerConfig, lanes: LaneGeometry, ego: VehicleParams,
                 a_min_lv: float = -3.0, virtual_distance: float = 500.0,
                 v_envelope: Optional[float] = None):
        self.cfg = cfg
        self.lanes = lanes
        self.ego = ego
        self.a_min_lv = a_min_lv
        self.virtual_distance = virtual_distance
        self.N = cfg.N
        if v_envelope is not None:
            self.N = self.check_horizon(v_envelope)
        self._matrices = prediction_matrices(self.N, cfg.Tp)
        self._warm: Dict[str, QpSolution] = {}
        self.previous: Optional[ControlSolution] = None

    def check_horizon(self, v_envelope: float) -> int:
        cfg = self.cfg
        envelope = max(v_envelope, cfg.v_max or 0.0)
        needed = required_horizon(envelope, cfg)
        if cfg.N >= needed:
            return cfg.N
        if not cfg.auto_horizon:
            raise ConfigError(f'controller.N = {cfg.N} is below the {needed} steps needed to '
                              f'stop from {envelope:.2f} m/s', key='controller.N')
        logger.info('Prediction horizon raised for the speed envelope',
                    extra={'configured': cfg.N, 'horizon': needed, 'v_envelope': envelope})
        return needed

    def candidate_modes(self, x0: CommonState) -> List[ControlMode]:
        lane = self.lanes.lane_of(x0.p_lat)
        targets = self.lanes.adjacent(lane)
        if self.cfg.lane_change_targets is not None:
            targets = tuple(t for t in targets if t in self.cfg.lane_change_targets)
        return [LANE_KEEP] + [ControlMode(t) for t in targets]

    def lane_keep_deactivated(self, scene: SceneSnapshot) -> bool:
        """Lane keeping is unavailable when the current-lane gap is already below dd."""
        x0 = scene.ego.state
        lane = self.lanes.lane_of(x0.p_lat)
        for vehicle in scene.targets:
            try:
                if self.lanes.lane_of(vehicle.state.p_lat) != lane:
                    continue
            except LaneError:
                continue
            gap = vehicle.state.p_lon - x0.p_lon
            dd = safety_offset(self.ego.length, vehicle.params.length, self.cfg.safety_margin)
            if 0.0 < gap < dd:
                return True
        return False

    def _schedules(self, mode, x0, ref) -> Tuple[Schedule, Schedule]:
        half = self.ego.width / 2.0
        margin = self.cfg.occupancy_margin
        Phi, G = self._matrices
        paths = plan_lateral(mode, x0, ref, self.cfg, self.lanes, half, self.N, Phi, G)
        if paths is None:
            lane = self.lanes.lane_of(x0.p_lat)
            span = sorted({lane, mode.terminal_lane(lane)})
            lanes = tuple(range(span[0], span[-1] + 1))
            lower = self.lanes.span(lanes[0])[0] + half
            upper = self.lanes.span(lanes[-1])[1] - half
            sched = Schedule([lanes] * self.N, np.full(self.N, lower), np.full(self.N, upper))
            return sched, sched
        return (occupancy_schedule(paths[0], self.lanes, half, margin),
                occupancy_schedule(paths[1], self.lanes, half, margin))

    def assemble(self, mode: ControlMode, scene: SceneSnapshot, scenarios: Sequence[Scenario],
                 schedules: Optional[Tuple[Schedule, Schedule]] = None,
                 include_nominal_safety: bool = True) -> Cftocp:
        x0 = scene.ego.state
        ref = build_reference(mode, x0, self.lanes, self.N, self.cfg.Tp)
        if schedules is None:
            schedules = self._schedules(mode, x0, ref)
        lanes_used = {lane for sched in schedules for step in sched.lanes for lane in step}
        worst = build_worst_case(scene, mode, self.a_min_lv, self.N, self.cfg.Tp,
                                 self.virtual_distance, extra_lanes=sorted(lanes_used))
        params = {v.id: v.params for v in scene.targets}
        return assemble_cftocp(mode, x0, scenarios, worst, ref, self.cfg, self.lanes, self.ego,
                               schedules, params, self.N, include_nominal_safety,
                               matrices=self._matrices)

    def solve_control_mode(self, mode: ControlMode, scene: SceneSnapshot,
                           scenarios: Sequence[Scenario]) -> ControlSolution:
        """
        Solve one mode. An infeasible mode reports feasible=False (logged at the cost sentinel)
        unless `relax_nominal_safety` is set, in which case it is retried without the nominal
        scenario gaps and flagged `relaxed`. Iteration exhaustion counts as infeasible.
        """
        if not mode.lane_change and self.lane_keep_deactivated(scene):
            logger.info('Lane keeping deactivated', extra={
                'mode': mode.label, 'cost': self.cfg.cost_sentinel})
            return ControlSolution(mode=mode, feasible=False, deactivated=True,
                                   status='deactivated')
        attempts = (False, True) if self.cfg.relax_nominal_safety else (False,)
        for relaxed in attempts:
            cftocp = self.assemble(mode, scene, scenarios, include_nominal_safety=not relaxed)
            sol = solve_qp(cftocp.problem, warm_start=self._warm.get(mode.label),
                           max_iter=self.cfg.max_iter)
            if sol.status is QpStatus.OPTIMAL:
                self._warm[mode.label] = sol
                return self._solution(cftocp, sol, relaxed)
        self._warm.pop(mode.label, None)
        logger.info('Control mode infeasible', extra={
            'mode': mode.label, 'status': sol.status.value, 'cost': self.cfg.cost_sentinel})
        return ControlSolution(mode=mode, feasible=False, status=sol.status.value,
                               iterations=sol.iterations)

    def _solution(self, cftocp: Cftocp, sol: QpSolution, relaxed: bool) -> ControlSolution:
        u_nom, u_worst = cftocp.inputs(sol.x)
        u_nom = u_nom.copy()
        u_worst = u_worst.copy()
        # equal up to solver round-off; the executed first input is shared exactly
        u_worst[0] = u_nom[0]
        if relaxed:
            logger.warning('Control mode solved without nominal scenario gaps',
                           extra={'mode': cftocp.mode.label})
        return ControlSolution(
            mode=cftocp.mode, feasible=True, cost=cftocp.nominal_cost(sol.x),
            u_nominal=u_nom, u_worst=u_worst,
            nominal_states=cftocp.states(sol.x, NOMINAL),
            worst_states=cftocp.states(sol.x, WORST),
            relaxed=relaxed, status=sol.status.value, iterations=sol.iterations,
            active_constraints=len(sol.working_set), qp=sol,
        )

    def step(self, scene: SceneSnapshot, scenarios: Sequence[Scenario]
             ) -> Tuple[ControlDecision, List[ControlSolution]]:
        """Solve every candidate mode and pick the executed first input."""
        x0 = scene.ego.state
        solutions = [self.solve_control_mode(mode, scene, scenarios)
                     for mode in self.candidate_modes(x0)]
        chosen = decide(solutions)
        if chosen is None:
            u0 = emergency_input(x0, self.cfg)
            logger.error('No feasible control mode, emergency braking', extra={
                'u0': u0, 'statuses': {s.mode.label: s.status for s in solutions}})
            decision = ControlDecision(mode=LANE_KEEP, u0=u0, solution=None, emergency=True)
            self.previous = None
        else:
            decision = ControlDecision(mode=chosen.mode, u0=chosen.u_nominal[0].copy(),
                                       solution=chosen)
            self.previous = chosen
        return decision, solutions

    def shift_check(self, scene: SceneSnapshot, scenarios: Sequence[Scenario],
                    tol: float = 1e-6) -> Optional[Dict[str, object]]:
        """
        Feasibility of the previous worst-case inputs shifted by one step with a zero input
        appended, used for both branches of the new problem of the same terminal lane.
        """
        prev = self.previous
        if prev is None or prev.u_worst is None:
            return None
        x0 = scene.ego.state
        current = self.lanes.lane_of(x0.p_lat)
        prev_terminal = self.lanes.lane_of(prev.worst_states[-1, 3])
        mode = LANE_KEEP if prev_terminal == current else ControlMode(prev_terminal)
        if mode.lane_change and mode.target_lane not in self.lanes.adjacent(current):
            return {'mode': mode.label, 'worst_branch': False, 'full': False,
                    'max_violation': math.inf}
        shifted = np.vstack([prev.u_worst[1:], np.zeros((1, 2))])
        z = np.concatenate([shifted.ravel(), shifted.ravel()])
        Phi, G = self._matrices
        x = x0.as_array()
        half = self.ego.width / 2.0
        path = (Phi @ x[3:] + G @ shifted[:, 1])[P::3]
        sched = occupancy_schedule(path, self.lanes, half, 0.0)
        cftocp = self.assemble(mode, scene, scenarios, schedules=(sched, sched))
        violations = cftocp.violations(z)
        worst_tags = ('box-worst', 'corridor-worst', 'safety-worst', 'terminal', 'first-input',
                      'bounds')
        worst_violation = max(violations.get(tag, 0.0) for tag in worst_tags)
        full_violation = max(violations.values()) if violations else 0.0
        result = {'mode': mode.label, 'worst_branch': worst_violation <= tol,
                  'full': full_violation <= tol, 'max_violation': float(full_violation)}
        if not result['worst_branch']:
            logger.warning('Shifted worst-case input violates the new problem',
                           extra={'violations': violations, 'mode': mode.label})
        return result
