"""
Closed-loop experiment driver.

The loop runs at the filter rate T: every tick the target vehicles are measured and
filtered; every Tp / T ticks the scenarios are generated, all control modes are solved and
the decided first input is held on the ego for the next Tp. Target vehicles are replayed
from a track file or scripted from the scene config.

Usage:
    cfg = load_config('configs/case1.json')
    result = run_closed_loop(cfg)
    write_outputs(result.steps, result.summary, 'runs/case1')
"""

import copy
import json
import math
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from highway_scmpc.config import ExperimentConfig, SceneConfig, VehicleSpec
from highway_scmpc.controller import ControlDecision, ScenarioController
from highway_scmpc.core_types import (
    A_LON, COMMON_INDICES, R_REF, V_LON, CommonState, LaneGeometry, Longitudinal, PolicyMode,
    SceneSnapshot, Vehicle, VehicleParams, jerk_step, nearest_ahead, safety_offset,
    vehicles_overlap,
)
from highway_scmpc.errors import CollisionError, FeasibilityViolation, LaneError
from highway_scmpc.policy_models import (
    GainSet, GainWeights, build_mode_dynamics, synthesize_gains, virtual_leader,
)
from highway_scmpc.predictor import EgoPlan, TrafficPredictor, VehiclePrediction
from highway_scmpc.scenarios import Scenario, enumerate_scenarios, select_scenarios
from highway_scmpc.structured_logger import get_logger, run_context, step_context
from highway_scmpc.tracks import TrackStore, TrackTransform, ingest_tracks
from highway_scmpc.version import get_version

logger = get_logger(__name__)

DIGITS = 6
COMMON = list(COMMON_INDICES)
CSV_MODES = ('lane-keep', 'lane-change-1', 'lane-change-2', 'lane-change-3')


def _r(value: Optional[float]) -> Optional[float]:
    if value is None or not math.isfinite(value):
        return None
    return round(float(value), DIGITS)


def _state_record(state: CommonState) -> List[float]:
    return [_r(v) for v in state.as_array()]


def build_gains(cfg: ExperimentConfig) -> GainSet:
    g = cfg.gains
    weights = GainWeights(tuple(g.lon_state_weights), g.lon_input_weight,
                          tuple(g.lat_state_weights), g.lat_input_weight)
    return synthesize_gains(weights, cfg.filter.T, k_lon_vt=g.k_lon_vt,
                            k_lon_dk=g.k_lon_dk, k_lat=g.k_lat)


@dataclass
class StepLog:
    """One control step of a closed-loop run."""

    step: int
    time: float
    ego: CommonState
    lane: int
    u: np.ndarray
    mode: str
    horizon: int
    costs: Dict[str, float]
    statuses: Dict[str, str]
    relaxed: bool
    emergency: bool
    scenarios: List[Scenario]
    predictions: Dict[int, VehiclePrediction]
    gap: Optional[float] = None
    gap_slack: Optional[float] = None
    shift_check: Optional[dict] = None
    # wall-clock seconds; never serialized into the step records
    solve_time: float = 0.0
    predict_time: float = 0.0

    @property
    def projection_flags(self) -> Dict[str, List[str]]:
        return {str(vid): list(p.flags) for vid, p in sorted(self.predictions.items())
                if p.flags}

    def to_record(self) -> dict:
        record = {
            'step': self.step,
            'time': _r(self.time),
            'ego': _state_record(self.ego),
            'lane': self.lane,
            'u': [_r(v) for v in self.u],
            'mode': self.mode,
            'horizon': self.horizon,
            'costs': {k: _r(v) for k, v in sorted(self.costs.items())},
            'statuses': dict(sorted(self.statuses.items())),
            'relaxed': self.relaxed,
            'emergency': self.emergency,
            'scenarios': [s.to_record(DIGITS) for s in self.scenarios],
            'predictions': [p.to_record(DIGITS) for _, p in sorted(self.predictions.items())],
            'projection_flags': self.projection_flags,
            'gap': _r(self.gap),
            'gap_slack': _r(self.gap_slack),
        }
        if self.shift_check is not None:
            record['shift_check'] = {k: (_r(v) if isinstance(v, float) else v)
                                     for k, v in sorted(self.shift_check.items())}
        return record

    def to_row(self) -> dict:
        """Per-step scalars for the CSV export."""
        row = {'step': self.step, 'time': _r(self.time)}
        for name, value in zip(('p_lon', 'v_lon', 'a_lon', 'p_lat', 'v_lat', 'a_lat'),
                               self.ego.as_array()):
            row[name] = _r(value)
        row.update({'lane': self.lane, 'j_lon': _r(self.u[0]), 'j_lat': _r(self.u[1]),
                    'mode': self.mode, 'horizon': self.horizon})
        for mode in CSV_MODES:
            row[f'cost_{mode.replace("-", "_")}'] = _r(self.costs[mode]) \
                if mode in self.costs else None
        row.update({'relaxed': self.relaxed, 'emergency': self.emergency,
                    'scenarios': len(self.scenarios), 'gap': _r(self.gap),
                    'gap_slack': _r(self.gap_slack)})
        return row


@dataclass
class RunResult:
    steps: List[StepLog]
    summary: dict


class TrafficSource(ABC):
    """Ground truth of the target vehicles, one filter tick at a time."""

    @abstractmethod
    def vehicles(self) -> List[Vehicle]:
        """Target vehicles at the current tick."""

    @abstractmethod
    def advance(self, ego: Vehicle):
        """Move to the next tick; `ego` is the controlled vehicle at the current tick."""


class ReplayTraffic(TrafficSource):
    """Open-loop replay of recorded tracks; states equal the source rows exactly."""

    def __init__(self, store: TrackStore, ego_id: int, start_frame: int, lanes: LaneGeometry):
        self.store = store
        self.ego_id = ego_id
        self.frame = start_frame
        self.lanes = lanes

    def vehicles(self) -> List[Vehicle]:
        return self.store.vehicles_at(self.frame, exclude=(self.ego_id,), lanes=self.lanes)

    def advance(self, ego: Vehicle):
        self.frame += 1


class ScriptedTraffic(TrafficSource):
    """
    Synthetic target vehicles. Behaviors:
        constant-velocity  longitudinal speed held, lateral position held
        brake              constant velocity until brake_time, then a_min_lv to standstill
        policy             closed-loop policy mode (e.g. DK-2) at the filter rate
    """

    def __init__(self, specs: Sequence[VehicleSpec], cfg: ExperimentConfig, gains: GainSet,
                 lanes: LaneGeometry):
        self.specs = {spec.id: spec for spec in specs}
        self.T = cfg.filter.T
        self.a_min = cfg.scenarios.a_min_lv
        self.virtual_distance = cfg.filter.virtual_lv_distance
        self.gains = gains
        self.lanes = lanes
        self.dk_matrix = cfg.gains.dk_matrix
        self.time = 0.0
        self._states: Dict[int, CommonState] = {
            spec.id: spec.initial_state() for spec in specs}
        self._r: Dict[int, float] = {}
        for spec in specs:
            if spec.behavior == 'policy':
                self._r[spec.id] = self._initial_r(spec)

    def _initial_r(self, spec: VehicleSpec) -> float:
        if spec.r_ref is not None:
            return float(spec.r_ref)
        mode = PolicyMode.from_label(spec.mode)
        state = spec.initial_state()
        if mode.longitudinal is Longitudinal.VT:
            return state.v_lon
        lead = self._lead(spec.id, mode, state, ())
        return (lead.state.p_lon - state.p_lon) / max(lead.state.v_lon, 0.1)

    def vehicles(self) -> List[Vehicle]:
        return [Vehicle(self.specs[vid].params(), state)
                for vid, state in sorted(self._states.items())]

    def _lead(self, vid: int, mode: PolicyMode, state: CommonState,
              others: Sequence[Vehicle]) -> Vehicle:
        pool = [v for v in list(others) + self.vehicles() if v.id != vid]
        lead = nearest_ahead(pool, state.p_lon, mode.target_lane, self.lanes)
        if lead is None:
            return Vehicle(VehicleParams(-1, 1.0, 1.0),
                           virtual_leader(state, self.virtual_distance))
        return lead

    def _brake(self, state: CommonState) -> CommonState:
        T, decel = self.T, abs(self.a_min)
        v = state.v_lon
        if v <= 0.0:
            return CommonState(state.p_lon, 0.0, 0.0, state.p_lat, 0.0, 0.0)
        if v - decel * T <= 0.0:
            dt = v / decel
            return CommonState(state.p_lon + v * dt - 0.5 * decel * dt * dt, 0.0, 0.0,
                               state.p_lat, 0.0, 0.0)
        return CommonState(state.p_lon + v * T - 0.5 * decel * T * T, v - decel * T,
                           self.a_min, state.p_lat, 0.0, 0.0)

    def _policy(self, spec: VehicleSpec, state: CommonState, ego: Vehicle) -> CommonState:
        mode = PolicyMode.from_label(spec.mode)
        lead = None
        if mode.longitudinal is Longitudinal.DK:
            lead = self._lead(spec.id, mode, state, (ego,)).state
        dyn = build_mode_dynamics(mode, self.gains, self.T, self.lanes, lv_state=lead,
                                  dk_matrix=self.dk_matrix)
        z = np.insert(state.as_array(), R_REF, self._r[spec.id])
        z = dyn.step(z)
        self._r[spec.id] = max(float(z[R_REF]), 0.0)
        if z[V_LON] < 0.0:
            z[V_LON] = 0.0
            z[A_LON] = max(z[A_LON], 0.0)
        return CommonState.from_array(z[COMMON])

    def advance(self, ego: Vehicle):
        nxt = {}
        for vid, state in self._states.items():
            spec = self.specs[vid]
            if spec.behavior == 'policy':
                nxt[vid] = self._policy(spec, state, ego)
            elif spec.behavior == 'brake' and self.time + 1e-9 >= spec.brake_time:
                nxt[vid] = self._brake(state)
            else:
                nxt[vid] = CommonState(state.p_lon + state.v_lon * self.T, state.v_lon, 0.0,
                                       state.p_lat, 0.0, 0.0)
        self._states = nxt
        self.time += self.T


def _ego_step(state: CommonState, u: np.ndarray, T: float) -> CommonState:
    nxt = jerk_step(state, u, T)
    if nxt.v_lon < 0.0:
        nxt = CommonState(nxt.p_lon, 0.0, max(nxt.a_lon, 0.0), nxt.p_lat, nxt.v_lat, nxt.a_lat)
    return nxt


def _shifted_plan(plan: Optional[np.ndarray], plan_time: float, now: float, N: int,
                  Tp: float) -> Optional[np.ndarray]:
    """Last planned ego path resampled on the horizon grid starting at `now`."""
    if plan is None:
        return None
    times = np.arange(plan.shape[0]) * Tp
    query = (now - plan_time) + np.arange(N + 1) * Tp
    query = query[query <= times[-1] + 1e-9]
    if query.size == 0:
        return None
    return np.column_stack([np.interp(query, times, plan[:, j]) for j in range(6)])


def _lead_gap(ego: Vehicle, targets: Sequence[Vehicle], lanes: LaneGeometry,
              margin: float) -> Tuple[Optional[float], Optional[float]]:
    try:
        lane = lanes.lane_of(ego.state.p_lat)
    except LaneError:
        return None, None
    lead = nearest_ahead(targets, ego.state.p_lon, lane, lanes)
    if lead is None:
        return None, None
    gap = lead.state.p_lon - ego.state.p_lon
    return gap, gap - safety_offset(ego.params.length, lead.params.length, margin)


def _vehicle_record(vehicle: Vehicle) -> dict:
    return {'id': vehicle.id, 'state': _state_record(vehicle.state),
            'length': vehicle.params.length, 'width': vehicle.params.width}


class Measurement:
    """Optional zero-mean Gaussian sensor noise on the common states."""

    def __init__(self, cfg: ExperimentConfig, rng: np.random.Generator):
        self.enabled = cfg.simulation.add_measurement_noise
        self.std = np.sqrt(np.asarray(cfg.filter.measurement_noise, dtype=float)[COMMON])
        self.rng = rng

    def __call__(self, vehicle: Vehicle) -> CommonState:
        if not self.enabled:
            return vehicle.state
        noisy = vehicle.state.as_array() + self.rng.normal(0.0, self.std)
        noisy[1] = max(noisy[1], 0.0)
        return CommonState.from_array(noisy)


def _initial_setup(cfg: ExperimentConfig, gains: GainSet,
                   lanes: LaneGeometry) -> Tuple[Vehicle, TrafficSource]:
    sim = cfg.simulation
    if cfg.scene is not None:
        spec = cfg.scene.ego
        ego = Vehicle(spec.params(), spec.initial_state())
        return ego, ScriptedTraffic(cfg.scene.targets, cfg, gains, lanes)
    store = ingest_tracks(sim.dataset, TrackTransform.from_config(cfg))
    # the ego's recorded future is dropped; only its state at the start frame is used
    ego = store.vehicle_at(sim.ego_id, sim.start_frame)
    return ego, ReplayTraffic(store, sim.ego_id, sim.start_frame, lanes)


def _percentiles(samples: Sequence[float]) -> Dict[str, Optional[float]]:
    if not samples:
        return {'p50_ms': None, 'p95_ms': None, 'max_ms': None}
    ms = np.asarray(samples) * 1000.0
    return {'p50_ms': round(float(np.percentile(ms, 50)), 3),
            'p95_ms': round(float(np.percentile(ms, 95)), 3),
            'max_ms': round(float(ms.max()), 3)}


def summarize(cfg: ExperimentConfig, steps: Sequence[StepLog],
              final_state: Optional[CommonState], lanes: LaneGeometry,
              min_gap: Optional[float], min_slack: Optional[float],
              infeasible_start: bool, collision: bool = False) -> dict:
    """Exit summary of a run; everything except `timing` is deterministic."""
    switches, lane_changes = [], []
    for prev, cur in zip(steps, steps[1:]):
        if cur.mode != prev.mode:
            switches.append({'time': _r(cur.time), 'from': prev.mode, 'to': cur.mode})
        if cur.lane != prev.lane:
            lane_changes.append({'time': _r(cur.time), 'from': prev.lane, 'to': cur.lane})
    final_lane = None
    if final_state is not None:
        try:
            final_lane = lanes.lane_of(final_state.p_lat)
        except LaneError:
            pass
    return {
        'name': cfg.name,
        'schema_version': cfg.schema_version,
        'version': get_version(),
        'seed': cfg.simulation.seed,
        'horizon': steps[0].horizon if steps else cfg.controller.N,
        'steps': len(steps),
        'final_time': _r(steps[-1].time + cfg.controller.Tp) if steps else 0.0,
        'final_state': _state_record(final_state) if final_state is not None else None,
        'final_lane': final_lane,
        'mode_switches': switches,
        'lane_changes': lane_changes,
        'min_gap': _r(min_gap),
        'min_gap_slack': _r(min_slack),
        'relaxed_steps': sum(s.relaxed for s in steps),
        'emergency_steps': sum(s.emergency for s in steps),
        'shift_violations': sum(1 for s in steps if s.shift_check is not None
                                and not s.shift_check['worst_branch']),
        'infeasible_start': infeasible_start,
        'collision': collision,
        'timing': {
            'solve': _percentiles([s.solve_time for s in steps]),
            'step': _percentiles([s.solve_time + s.predict_time for s in steps]),
        },
    }


def run_closed_loop(cfg: ExperimentConfig, on_step: Optional[Callable[[StepLog], None]] = None,
                    duration: Optional[float] = None,
                    verify_feasibility: Optional[bool] = None) -> RunResult:
    """
    Simulate the controlled ego among the configured traffic.

    Args:
        cfg: validated experiment configuration
        on_step: called with every StepLog as soon as it is produced
        duration: overrides simulation.Ts
        verify_feasibility: overrides simulation.verify_feasibility (shift re-check)

    Raises:
        CollisionError: ego and a target overlap at a filter tick; carries forensics
        FeasibilityViolation: no control mode is feasible after a feasible start
    """
    sim, ctrl = cfg.simulation, cfg.controller
    verify = sim.verify_feasibility if verify_feasibility is None else verify_feasibility
    lanes = cfg.lanes.geometry()
    gains = build_gains(cfg)
    ego, traffic = _initial_setup(cfg, gains, lanes)
    rng = np.random.default_rng(sim.seed)
    measure = Measurement(cfg, rng)

    controller = ScenarioController(ctrl, lanes, ego.params, cfg.scenarios.a_min_lv,
                                    cfg.filter.virtual_lv_distance,
                                    v_envelope=ego.state.v_lon)
    predictor = TrafficPredictor(cfg, gains, horizon=controller.N)
    stride = cfg.stride
    n_ticks = int(round((duration if duration is not None else sim.Ts) / cfg.filter.T))

    steps: List[StepLog] = []
    u = np.zeros(2)
    plan, plan_time = None, 0.0
    min_gap = min_slack = None
    infeasible_start = False
    feasible_seen = False

    with run_context() as run_id:
        logger.info('Closed-loop run started', extra={
            'run_name': cfg.name, 'seed': sim.seed, 'horizon': controller.N,
            'ticks': n_ticks, 'run_id': run_id})
        for tick in range(n_ticks):
            now = tick * cfg.filter.T
            targets = traffic.vehicles()
            for target in targets:
                if vehicles_overlap(ego, target):
                    forensics = {
                        'time': _r(now), 'tick': tick, 'ego': _vehicle_record(ego),
                        'target': _vehicle_record(target),
                        'targets': [_vehicle_record(v) for v in targets],
                        'last_step': steps[-1].to_record() if steps else None,
                    }
                    logger.error('Collision', extra={'time': now, 'target_id': target.id})
                    raise CollisionError(f'ego collided with vehicle {target.id} at '
                                         f't = {now:.2f} s', forensics=forensics)
            gap, slack = _lead_gap(ego, targets, lanes, ctrl.safety_margin)
            if gap is not None:
                min_gap = gap if min_gap is None else min(min_gap, gap)
                min_slack = slack if min_slack is None else min(min_slack, slack)

            measured = [Vehicle(v.params, measure(v)) for v in targets]
            started = time.perf_counter()
            fans = predictor.step(
                {v.id: (v.params, v.state) for v in measured},
                ego=EgoPlan(ego.params, ego.state,
                            _shifted_plan(plan, plan_time, now, controller.N, ctrl.Tp)))
            predict_time = time.perf_counter() - started

            if tick % stride == 0:
                step = tick // stride
                with step_context(step):
                    scene = SceneSnapshot(now, ego, tuple(measured), lanes)
                    scenarios = select_scenarios(
                        enumerate_scenarios(fans, cfg.scenarios.max_scenarios,
                                            cfg.scenarios.p_threshold),
                        cfg.scenarios.p_threshold)
                    shift = controller.shift_check(scene, scenarios) if verify else None
                    started = time.perf_counter()
                    decision, solutions = controller.step(scene, scenarios)
                    solve_time = time.perf_counter() - started
                    infeasible_start, feasible_seen = _check_decision(
                        decision, step, now, feasible_seen, infeasible_start, solutions)
                    u = decision.u0
                    if decision.solution is not None:
                        plan, plan_time = decision.solution.nominal_states, now
                    log = StepLog(
                        step=step, time=now, ego=ego.state, lane=lanes.lane_of(ego.state.p_lat),
                        u=u.copy(), mode=decision.mode.label if not decision.emergency
                        else 'emergency', horizon=controller.N,
                        costs={s.mode.label: s.logged_cost(ctrl.cost_sentinel)
                               for s in solutions},
                        statuses={s.mode.label: s.status for s in solutions},
                        relaxed=bool(decision.solution is not None
                                     and decision.solution.relaxed),
                        emergency=decision.emergency, scenarios=scenarios,
                        predictions=fans, gap=gap, gap_slack=slack, shift_check=shift,
                        solve_time=solve_time, predict_time=predict_time)
                    steps.append(log)
                    if on_step is not None:
                        on_step(log)

            ego = Vehicle(ego.params, _ego_step(ego.state, u, cfg.filter.T))
            traffic.advance(ego)

        summary = summarize(cfg, steps, ego.state, lanes, min_gap, min_slack, infeasible_start)
        logger.info('Closed-loop run finished', extra={
            'steps': len(steps), 'min_gap_slack': min_slack,
            'relaxed_steps': summary['relaxed_steps']})
    return RunResult(steps=steps, summary=summary)


def _check_decision(decision: ControlDecision, step: int, now: float, feasible_seen: bool,
                    infeasible_start: bool, solutions) -> Tuple[bool, bool]:
    if not decision.emergency:
        return infeasible_start, True
    if not feasible_seen:
        if step == 0:
            logger.warning('Infeasible at the initial state; braking until a mode is feasible')
        return True, False
    raise FeasibilityViolation(
        f'no feasible control mode at t = {now:.2f} s after a feasible start',
        time=_r(now), statuses={s.mode.label: s.status for s in solutions})


def run_predict(cfg: ExperimentConfig, duration: Optional[float] = None) -> List[dict]:
    """
    Filter-only run: the ego drives open loop (replayed from the dataset when it is
    recorded there, constant velocity otherwise) and the prediction fans are recorded at
    every control tick.
    """
    sim = cfg.simulation
    lanes = cfg.lanes.geometry()
    gains = build_gains(cfg)
    ego, traffic = _initial_setup(cfg, gains, lanes)
    predictor = TrafficPredictor(cfg, gains)
    measure = Measurement(cfg, np.random.default_rng(sim.seed))
    store = traffic.store if isinstance(traffic, ReplayTraffic) else None
    n_ticks = int(round((duration if duration is not None else sim.Ts) / cfg.filter.T))

    records = []
    with run_context():
        for tick in range(n_ticks):
            now = tick * cfg.filter.T
            measured = [Vehicle(v.params, measure(v)) for v in traffic.vehicles()]
            fans = predictor.step({v.id: (v.params, v.state) for v in measured},
                                  ego=EgoPlan(ego.params, ego.state))
            if tick % cfg.stride == 0:
                records.append({
                    'step': tick // cfg.stride, 'time': _r(now),
                    'ego': _state_record(ego.state),
                    'predictions': [p.to_record(DIGITS) for _, p in sorted(fans.items())],
                })
            frame = (sim.start_frame or 0) + tick + 1
            if store is not None and store.has(sim.ego_id, frame):
                ego = store.vehicle_at(sim.ego_id, frame)
            else:
                s = ego.state
                ego = Vehicle(ego.params, CommonState(s.p_lon + s.v_lon * cfg.filter.T,
                                                      s.v_lon, 0.0, s.p_lat, 0.0, 0.0))
            traffic.advance(ego)
    logger.info('Prediction run finished', extra={'records': len(records)})
    return records


def random_scene(rng: np.random.Generator, cfg: ExperimentConfig) -> ExperimentConfig:
    """
    Randomized stress scene: a lead vehicle in the ego lane that brakes at a_min_lv from a
    random time, and one or two constant-velocity vehicles ahead in other lanes. The initial
    gap leaves the ego room to stop behind the braking lead.
    """
    lanes = cfg.lanes.geometry()
    ctrl = cfg.controller
    ego_lane = int(rng.integers(1, 4))
    v0 = float(rng.uniform(20.0, 35.0))
    ego = VehicleSpec(id=0, state=[0.0, v0, 0.0, lanes.centerline(ego_lane), 0.0, 0.0],
                      length=float(rng.uniform(4.2, 5.0)), width=float(rng.uniform(1.8, 2.1)))

    length = float(rng.uniform(4.2, 12.0))
    v_lead = float(np.clip(v0 + rng.uniform(-5.0, 2.0), 15.0, 36.0))
    decel, a_min = abs(cfg.scenarios.a_min_lv), abs(ctrl.a_lon_min)
    ramp = a_min / abs(ctrl.j_lon_min)
    stop_ego = v0 * ramp + v0 * v0 / (2.0 * a_min)
    stop_lead = v_lead * v_lead / (2.0 * decel)
    delta_d = safety_offset(ego.length, length, ctrl.safety_margin)
    gap = max(stop_ego - stop_lead, 0.0) + ctrl.tau * v0 + delta_d + 2.0 * ctrl.Tp * v0 \
        + float(rng.uniform(0.0, 30.0))
    targets = [VehicleSpec(id=1, state=[gap, v_lead, 0.0, lanes.centerline(ego_lane), 0.0, 0.0],
                           length=length, width=float(rng.uniform(1.8, 2.5)), behavior='brake',
                           brake_time=float(rng.uniform(0.0, cfg.simulation.Ts / 2.0)))]

    others = [lane for lane in lanes.lanes if lane != ego_lane]
    for i in range(int(rng.integers(0, 3))):
        lane = others[i % len(others)]
        targets.append(VehicleSpec(
            id=2 + i,
            state=[float(rng.uniform(delta_d + 10.0, 150.0)), float(rng.uniform(v0, v0 + 8.0)),
                   0.0, lanes.centerline(lane), 0.0, 0.0],
            length=float(rng.uniform(4.2, 12.0)), width=float(rng.uniform(1.8, 2.5))))

    scene_cfg = copy.deepcopy(cfg)
    scene_cfg.simulation.dataset = None
    scene_cfg.scene = SceneConfig(ego=ego, targets=targets)
    return scene_cfg


def bench(cfg: ExperimentConfig, scenes: int = 100, seed: int = 0,
          duration: float = 2.0) -> dict:
    """Per-step pipeline latency over random scenes (prediction plus control)."""
    step_times, solve_times = [], []
    collisions = violations = 0
    for index in range(scenes):
        rng = np.random.default_rng([seed, index])
        scene_cfg = random_scene(rng, cfg)
        try:
            result = run_closed_loop(scene_cfg, duration=duration)
        except CollisionError:
            collisions += 1
            continue
        except FeasibilityViolation:
            violations += 1
            continue
        step_times.extend(s.solve_time + s.predict_time for s in result.steps)
        solve_times.extend(s.solve_time for s in result.steps)
    report = {
        'version': get_version(),
        'seed': seed,
        'scenes': scenes,
        'duration': duration,
        'steps': len(step_times),
        'step': _percentiles(step_times),
        'solve': _percentiles(solve_times),
        'collisions': collisions,
        'feasibility_violations': violations,
    }
    logger.info('Bench finished', extra=report)
    return report


def step_records(steps: Sequence[StepLog]) -> List[dict]:
    return [s.to_record() for s in steps]


def dumps_record(record: dict) -> str:
    return json.dumps(record, sort_keys=True, separators=(',', ':'))


def write_outputs(steps: Sequence[StepLog], summary: dict, out_dir: Union[str, Path],
                  fmt: str = 'jsonl', collision: Optional[dict] = None) -> Dict[str, Path]:
    """
    Write `steps.jsonl` (or `steps.csv`), `summary.json` and, after a collision,
    `collision.json` into `out_dir`.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {}
    if fmt == 'csv':
        path = out / 'steps.csv'
        pd.DataFrame([s.to_row() for s in steps]).to_csv(path, index=False)
    else:
        path = out / 'steps.jsonl'
        with open(path, 'w') as f:
            for step in steps:
                f.write(dumps_record(step.to_record()) + '\n')
    written['steps'] = path
    written['summary'] = _write_json(out / 'summary.json', summary)
    if collision is not None:
        written['collision'] = _write_json(out / 'collision.json', collision)
    return written


def write_jsonl(records: Sequence[dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        for record in records:
            f.write(dumps_record(record) + '\n')
    return path


def _write_json(path: Path, payload: dict) -> Path:
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write('\n')
    return path
