"""
Scenario generation for the controller.

A scenario fixes one policy mode per target vehicle for the whole horizon. Its probability
is the product of the vehicles' mode probabilities (vehicles treated as independent).
Unlikely scenarios are dropped and the rest renormalized. The worst case is separate: the
lead vehicle of each relevant lane brakes at its minimum acceleration until standstill.

Usage:
    strict = filter_renormalize(enumerate_scenarios(fans), p_threshold=0.05)
    scenarios = select_scenarios(enumerate_scenarios(fans), p_threshold=0.05)
    worst = build_worst_case(scene, ControlMode(1), a_min_lv=-3.0, N=15, Tp=0.4)
"""

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from highway_scmpc.core_types import (
    ALL_MODES, COMMON_INDICES, ControlMode, PolicyMode, SceneSnapshot, Vehicle, nearest_ahead,
)
from highway_scmpc.errors import ScenarioError
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)

COMMON = list(COMMON_INDICES)


@dataclass(frozen=True)
class Scenario:
    assignment: Tuple[Tuple[int, PolicyMode], ...]
    probability: float
    trajectories: Mapping[int, np.ndarray] = field(default_factory=dict)

    @property
    def modes(self) -> Dict[int, PolicyMode]:
        return dict(self.assignment)

    @property
    def label(self) -> str:
        return ','.join(f'{vid}:{mode.label}' for vid, mode in self.assignment) or 'empty'

    def to_record(self, digits: int = 6) -> dict:
        return {'assignment': {str(vid): mode.label for vid, mode in self.assignment},
                'probability': round(self.probability, digits)}


def _supports(mode_probabilities: Mapping[int, Sequence[float]]) -> Dict[int, np.ndarray]:
    return {vid: np.asarray(mu, dtype=float) for vid, mu in sorted(mode_probabilities.items())}


def _count(tables: Mapping[int, np.ndarray]) -> int:
    return math.prod(int(np.count_nonzero(mu > 0.0)) for mu in tables.values())


def _prune(tables: Dict[int, np.ndarray], threshold: float) -> Dict[int, np.ndarray]:
    pruned = {}
    for vid, mu in tables.items():
        keep = (mu >= threshold) | (np.arange(mu.size) == int(np.argmax(mu)))
        kept = np.where(keep, mu, 0.0)
        pruned[vid] = kept / kept.sum()
    return pruned


def enumerate_assignments(mode_probabilities: Mapping[int, Sequence[float]],
                          max_scenarios: int = 4096, p_threshold: float = 0.05
                          ) -> List[Tuple[Tuple[Tuple[int, PolicyMode], ...], float]]:
    """
    All joint mode assignments with nonzero product probability, vehicles in id order.

    When the product exceeds `max_scenarios`, each vehicle's modes below `p_threshold` are
    dropped (and its table renormalized) before enumerating. Only if that is not enough is
    the per-vehicle threshold raised to p_threshold ** (1 / V).

    Raises:
        ScenarioError: the pruned product still exceeds `max_scenarios`
    """
    tables = _supports(mode_probabilities)
    if not tables:
        return [((), 1.0)]
    if _count(tables) > max_scenarios:
        # a factor below p_threshold already puts its scenarios below the filter
        tables = _prune(tables, p_threshold)
        if _count(tables) > max_scenarios:
            tables = _prune(tables, p_threshold ** (1.0 / len(tables)))
        logger.info('Per-vehicle modes pruned before enumeration',
                    extra={'vehicles': len(tables), 'scenarios': _count(tables)})
        if _count(tables) > max_scenarios:
            raise ScenarioError(
                f'{_count(tables)} scenarios exceed the cap of {max_scenarios}; raise '
                f'scenarios.p_threshold so per-vehicle modes are pruned first',
                count=_count(tables))

    ids = list(tables)
    choices = [[(ALL_MODES[i], float(mu[i])) for i in np.flatnonzero(mu > 0.0)]
               for mu in tables.values()]
    out = []
    for combo in itertools.product(*choices):
        probability = math.prod(p for _, p in combo)
        out.append((tuple((vid, mode) for vid, (mode, _) in zip(ids, combo)), probability))
    return out


def enumerate_scenarios(fans: Mapping[int, object], max_scenarios: int = 4096,
                        p_threshold: float = 0.05) -> List[Scenario]:
    """
    Scenarios over the prediction fans of all target vehicles.

    Each scenario carries, per vehicle, the common-state trajectory predicted under the
    assigned mode (the mode's own projected prediction, not the fused one).
    """
    assignments = enumerate_assignments({vid: fan.mu for vid, fan in fans.items()},
                                        max_scenarios, p_threshold)
    scenarios = []
    for assignment, probability in assignments:
        trajectories = {}
        for vid, mode in assignment:
            fan = fans[vid]
            source = fan.trajectory if fan.mode_trajectories is None \
                else fan.mode_trajectories[mode.index]
            trajectories[vid] = source[:, COMMON]
        scenarios.append(Scenario(assignment, probability, trajectories))
    return scenarios


def filter_renormalize(scenarios: Sequence[Scenario], p_threshold: float) -> List[Scenario]:
    """
    Drop scenarios below `p_threshold` and divide the survivors by one minus the dropped mass.

    Raises:
        ScenarioError: no scenario reaches the threshold
    """
    survivors = [s for s in scenarios if s.probability >= p_threshold]
    if not survivors:
        raise ScenarioError(f'no scenario reaches the probability threshold {p_threshold}',
                            count=len(scenarios))
    dropped = sum(s.probability for s in scenarios if s.probability < p_threshold)
    if dropped == 0.0:
        return list(survivors)
    scale = 1.0 - dropped
    return [replace(s, probability=s.probability / scale) for s in survivors]


def select_scenarios(scenarios: Sequence[Scenario], p_threshold: float) -> List[Scenario]:
    """
    Threshold filtering for the control loop. When no scenario reaches `p_threshold`
    (several vehicles with near-uniform mode probabilities), the likeliest scenarios are
    kept until their mass reaches the threshold, then renormalized.
    """
    if not scenarios:
        raise ScenarioError('no scenarios to select from', count=0)
    if any(s.probability >= p_threshold for s in scenarios):
        return filter_renormalize(scenarios, p_threshold)
    ranked = sorted(scenarios, key=lambda s: -s.probability)
    kept, mass = [], 0.0
    for scenario in ranked:
        kept.append(scenario)
        mass += scenario.probability
        if mass >= p_threshold:
            break
    logger.warning('No scenario reaches the threshold, keeping the likeliest',
                   extra={'scenarios': len(scenarios), 'kept': len(kept),
                          'kept_mass': mass, 'p_threshold': p_threshold})
    return [replace(s, probability=s.probability / mass) for s in kept]


@dataclass(frozen=True)
class BrakingLead:
    lane: int
    vehicle_id: Optional[int]
    length: float
    trajectory: np.ndarray
    virtual: bool = False


@dataclass(frozen=True)
class WorstCaseScenario:
    """Per relevant lane, the lead vehicle braking at a_min until standstill."""

    leads: Mapping[int, BrakingLead]
    a_min: float

    def lead_in(self, lane: int) -> Optional[BrakingLead]:
        return self.leads.get(lane)


def braking_trajectory(state: Sequence[float], a_min: float, N: int, Tp: float) -> np.ndarray:
    """
    Common-state path of a vehicle braking at `a_min` from `state`, integrated exactly
    through the standstill clamp. Lateral state is held.
    """
    p0, v0, _, p_lat = state[0], max(state[1], 0.0), state[2], state[3]
    decel = abs(a_min)
    t_stop = v0 / decel
    rows = np.zeros((N + 1, 6))
    for k in range(N + 1):
        t = k * Tp
        if t < t_stop:
            rows[k, :3] = [p0 + v0 * t - 0.5 * decel * t * t, v0 - decel * t, a_min]
        else:
            rows[k, :3] = [p0 + v0 * v0 / (2.0 * decel), 0.0, 0.0]
        rows[k, 3] = p_lat
    return rows


def relevant_lanes(scene: SceneSnapshot, control_mode: ControlMode,
                   half_width: Optional[float] = None) -> Tuple[int, ...]:
    """Current lane (or lanes touched by the ego's footprint), plus the target lane."""
    lanes = scene.lanes
    ego = scene.ego.state
    width = scene.ego.params.width / 2.0 if half_width is None else half_width
    occupied = set(lanes.lanes_overlapped(ego.p_lat, width))
    occupied.add(lanes.lane_of(ego.p_lat))
    if control_mode.lane_change:
        occupied.add(control_mode.target_lane)
    return tuple(sorted(occupied))


def build_worst_case(scene: SceneSnapshot, control_mode: ControlMode, a_min_lv: float, N: int,
                     Tp: float, virtual_distance: float = 500.0,
                     extra_lanes: Sequence[int] = ()) -> WorstCaseScenario:
    """
    Worst-case braking lead per relevant lane. A lane without a vehicle ahead of the ego gets
    a virtual lead `virtual_distance` ahead at the ego's speed and with the ego's length.
    `extra_lanes` adds lanes a planned path passes through.

    Vehicles behind the ego never become braking leads: the ego answers only for collisions
    with vehicles in front. A follower in the target lane of a lane change is kept clear by
    the rear rows of the nominal branch instead.
    """
    ego: Vehicle = scene.ego
    leads: Dict[int, BrakingLead] = {}
    for lane in sorted(set(relevant_lanes(scene, control_mode)) | set(extra_lanes)):
        lead = nearest_ahead(scene.targets, ego.state.p_lon, lane, scene.lanes)
        if lead is None:
            center = scene.lanes.centerline(lane)
            start = (ego.state.p_lon + virtual_distance, ego.state.v_lon, 0.0, center)
            leads[lane] = BrakingLead(lane, None, ego.params.length,
                                      braking_trajectory(start, a_min_lv, N, Tp), virtual=True)
            continue
        s = lead.state
        leads[lane] = BrakingLead(lane, lead.id, lead.params.length,
                                  braking_trajectory((s.p_lon, s.v_lon, s.a_lon, s.p_lat),
                                                     a_min_lv, N, Tp))
    return WorstCaseScenario(leads=leads, a_min=a_min_lv)
