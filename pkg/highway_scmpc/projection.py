"""
No-collision projection of predicted trajectories and traffic priority ordering.

A lower-priority vehicle's estimate is corrected by the smallest weighted change of its
longitudinal state [p, v, a] such that its re-propagated prediction keeps the safety gap
behind every higher-priority vehicle sharing its lane. When a higher-priority vehicle's two
most likely lateral hypotheses put it in different lanes, a binary per hypothesis selects
which constraint set applies and the problem becomes a small MIQP.
"""

import heapq
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from highway_scmpc.core_types import A_LON, LaneGeometry, P_LAT, P_LON, R_REF, V_LON, safety_offset
from highway_scmpc.errors import LaneError
from highway_scmpc.imm import predict_horizon, state_transition
from highway_scmpc.policy_models import ModeDynamics
from highway_scmpc.qp import MiqpProblem, QpProblem, solve_miqp, solve_qp
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)

LON_INDICES = (P_LON, V_LON, A_LON)
MAX_PROJECTION_BINARIES = 12


@dataclass(frozen=True)
class LateralHypothesis:
    probability: float
    p_lat: np.ndarray


@dataclass(frozen=True)
class LeaderPrediction:
    """Higher-priority vehicle as seen by the projection: fused longitudinal path plus its
    most likely lateral paths, probability-descending."""

    vehicle_id: int
    length: float
    width: float
    p_lon: np.ndarray
    v_lon: np.ndarray
    p_lat: np.ndarray
    hypotheses: Tuple[LateralHypothesis, ...] = ()

    @property
    def lateral_paths(self) -> Tuple[LateralHypothesis, ...]:
        return self.hypotheses or (LateralHypothesis(1.0, self.p_lat),)


@dataclass(frozen=True)
class ProjectionSettings:
    tau: float = 0.0
    margin: float = 0.0
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    big_m: float = 1e4
    rho: float = 1.0
    eps: float = 1e-6


@dataclass
class ProjectionResult:
    z: np.ndarray
    delta: np.ndarray
    trajectory: np.ndarray
    active: bool = False
    flags: Tuple[str, ...] = ()
    assignment: Dict[int, int] = field(default_factory=dict)

    def residual_augmentation(self, P: np.ndarray, eps: float) -> Tuple[np.ndarray, np.ndarray]:
        """Projection part of the innovation residual and its covariance."""
        idx = list(LON_INDICES)
        return -self.delta[idx], P[np.ix_(idx, idx)] + eps * np.eye(len(idx))


def _safe_lane(lanes: LaneGeometry, p_lat: float) -> Optional[int]:
    try:
        return lanes.lane_of(p_lat)
    except LaneError:
        return None


def _rows_for(leader_p, path, follower_lanes, lanes, offset, tau, Phi, base, variables):
    """Gap rows (A, b) of one lateral path: p_t + tau v_t <= p_lead_t - offset."""
    A, b = [], []
    for t in range(1, len(Phi)):
        lane = _safe_lane(lanes, path[t])
        if lane is None or lane != follower_lanes[t]:
            continue
        row = Phi[t][P_LON, variables] + tau * Phi[t][V_LON, variables]
        rhs = leader_p[t] - offset - (base[t][P_LON] + tau * base[t][V_LON])
        A.append(row)
        b.append(rhs)
    return A, b


def _physically_overlapping(z, length, width, leader: LeaderPrediction) -> bool:
    dx = abs(z[P_LON] - leader.p_lon[0])
    dy = abs(z[P_LAT] - leader.p_lat[0])
    return dx < (length + leader.length) / 2.0 and dy < (width + leader.width) / 2.0


def project_no_collision(z: np.ndarray, dyns: Sequence[ModeDynamics], length: float,
                         width: float, leaders: Sequence[LeaderPrediction], lanes: LaneGeometry,
                         settings: ProjectionSettings = ProjectionSettings()
                         ) -> ProjectionResult:
    """
    Minimal correction of an estimate so its prediction respects all same-lane gaps.

    Args:
        z: current 7-dim estimate of the follower under one mode
        dyns: the mode's model per prediction step
        length, width: follower footprint
        leaders: higher-priority vehicles; only those ahead at the current time constrain
        lanes: lane geometry deciding same-lane applicability per step
        settings: gap definition, objective weights and MIQP parameters

    Returns:
        ProjectionResult; `flags` contains 'standstill' when the follower already overlaps
        a leader or no correction exists, and 'miqp' when binaries were needed
    """
    z = np.asarray(z, dtype=float)
    dyns = list(dyns)
    Phi, offsets = state_transition(dyns)
    base = [P @ z + c for P, c in zip(Phi, offsets)]
    trajectory = np.stack(base)
    unchanged = ProjectionResult(z=z.copy(), delta=np.zeros_like(z),
                                 trajectory=predict_horizon(z, dyns))

    ahead = [ld for ld in leaders if ld.p_lon[0] > z[P_LON]]
    for leader in leaders:
        if _physically_overlapping(z, length, width, leader):
            return _standstill(z, dyns, leader.vehicle_id, 'overlap')
    if not ahead:
        return unchanged

    follower_lanes = [_safe_lane(lanes, traj[P_LAT]) for traj in trajectory]
    result = _solve_projection(z, dyns, Phi, base, follower_lanes, length, ahead, lanes,
                               settings, LON_INDICES)
    if result is None:
        result = _solve_projection(z, dyns, Phi, base, follower_lanes, length, ahead,
                                   lanes, settings, LON_INDICES + (R_REF,))
    if result is None:
        return _standstill(z, dyns, ahead[0].vehicle_id, 'infeasible')
    return result


def _solve_projection(z, dyns, Phi, base, follower_lanes, length, leaders, lanes,
                      settings, variables):
    variables = list(variables)
    nv = len(variables)
    fixed_rows_A: List[np.ndarray] = []
    fixed_rows_b: List[float] = []
    switched = []  # (leader id, [(probability, A, b), ...])

    for leader in leaders:
        offset = safety_offset(length, leader.length, settings.margin)
        paths = leader.lateral_paths
        top = paths[:2]
        sets = [(h.probability,) + _rows_for(leader.p_lon, h.p_lat, follower_lanes, lanes,
                                              offset, settings.tau, Phi, base, variables)
                for h in top]
        patterns = [tuple(sorted(zip(map(tuple, A), b))) for _, A, b in sets]
        needs_binary = len(sets) == 2 and patterns[0] != patterns[1] \
            and 2 * (len(switched) + 1) <= MAX_PROJECTION_BINARIES
        if needs_binary:
            switched.append((leader.vehicle_id, sets))
        else:
            fixed_rows_A.extend(sets[0][1])
            fixed_rows_b.extend(sets[0][2])

    # already safe: nothing to project
    feasible = all(float(a @ np.zeros(nv)) <= rhs + 1e-9 for a, rhs in
                   zip(fixed_rows_A, fixed_rows_b))
    for _, sets in switched:
        feasible = feasible and any(all(rhs >= -1e-9 for rhs in b) for _, _, b in sets)
    if feasible:
        return ProjectionResult(z=z.copy(), delta=np.zeros_like(z),
                                trajectory=predict_horizon(z, dyns))

    weights = list(settings.weights) + [settings.weights[-1]] * (nv - 3)
    nb = 2 * len(switched)
    n = nv + nb
    H = np.zeros((n, n))
    H[:nv, :nv] = np.diag(weights)
    H[nv:, nv:] = 1e-8 * np.eye(nb)
    g = np.zeros(n)
    A_rows, b_rows, A_eq, b_eq = [], [], [], []
    for a, rhs in zip(fixed_rows_A, fixed_rows_b):
        A_rows.append(np.concatenate([a, np.zeros(nb)]))
        b_rows.append(rhs)
    for k, (_, sets) in enumerate(switched):
        eq = np.zeros(n)
        for h, (probability, A, b) in enumerate(sets):
            j = nv + 2 * k + h
            g[j] = settings.rho * -math.log(max(probability, 1e-12))
            eq[j] = 1.0
            for a, rhs in zip(A, b):
                row = np.concatenate([a, np.zeros(nb)])
                row[j] = settings.big_m
                A_rows.append(row)
                b_rows.append(rhs + settings.big_m)
        A_eq.append(eq)
        b_eq.append(1.0)

    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[nv:] = 0.0
    upper[nv:] = 1.0
    problem = QpProblem(H, g, A_eq=np.array(A_eq) if A_eq else None,
                        b_eq=np.array(b_eq) if b_eq else None,
                        A_ineq=np.array(A_rows) if A_rows else None,
                        b_ineq=np.array(b_rows) if b_rows else None,
                        lower=lower, upper=upper)
    if nb:
        sol = solve_miqp(MiqpProblem(problem, binaries=range(nv, n)))
    else:
        sol = solve_qp(problem)
    if not sol.optimal:
        return None

    delta = np.zeros_like(z)
    delta[variables] = sol.x[:nv]
    z_proj = z + delta
    assignment = {}
    for k, (vehicle_id, _) in enumerate(switched):
        assignment[vehicle_id] = int(round(sol.x[nv + 2 * k + 1]))
    projected = predict_horizon(z_proj, dyns)
    flags = ('miqp',) if nb else ()
    if R_REF in variables:
        flags += ('r_ref',)
    return ProjectionResult(z=z_proj, delta=delta, trajectory=projected, active=True,
                            flags=flags, assignment=assignment)


def _standstill(z, dyns, leader_id, reason) -> ProjectionResult:
    z_proj = z.copy()
    z_proj[V_LON] = 0.0
    z_proj[A_LON] = 0.0
    trajectory = np.repeat(z_proj[None, :], len(dyns) + 1, axis=0)
    logger.warning('Projection clamped to standstill',
                   extra={'leader_id': leader_id, 'reason': reason})
    return ProjectionResult(z=z_proj, delta=z_proj - z, trajectory=trajectory, active=True,
                            flags=('standstill',))


def clamp_behind(trajectory: np.ndarray, length: float, leaders: Sequence[LeaderPrediction],
                 lanes: LaneGeometry, tau: float = 0.0, margin: float = 0.0) -> np.ndarray:
    """
    Closed-form re-projection of a fused trajectory: wherever the follower shares a lane with
    a leader that was ahead at the first step, cap its position at p_lead - offset - tau v.
    """
    out = np.array(trajectory, dtype=float, copy=True)
    for leader in leaders:
        if leader.p_lon[0] <= out[0, P_LON]:
            continue
        offset = safety_offset(length, leader.length, margin)
        for t in range(1, out.shape[0]):
            if _safe_lane(lanes, out[t, P_LAT]) != _safe_lane(lanes, leader.p_lat[t]):
                continue
            cap = leader.p_lon[t] - offset - tau * out[t, V_LON]
            if out[t, P_LON] > cap:
                out[t, P_LON] = cap
    return out


def gap_violations(trajectory: np.ndarray, length: float, leader: LeaderPrediction,
                   lanes: LaneGeometry, margin: float = 0.0, tol: float = 1e-6) -> List[int]:
    """Horizon steps where a same-lane gap behind `leader` falls below the safety offset."""
    if leader.p_lon[0] <= trajectory[0, P_LON]:
        return []
    offset = safety_offset(length, leader.length, margin)
    return [
        t for t in range(1, trajectory.shape[0])
        if _safe_lane(lanes, trajectory[t, P_LAT]) == _safe_lane(lanes, leader.p_lat[t])
        and leader.p_lon[t] - trajectory[t, P_LON] < offset - tol
    ]


@dataclass(frozen=True)
class OrderingEntry:
    vehicle_id: int
    p_lon: float
    lane: Optional[int]
    progress: float


def _precedes(a: OrderingEntry, b: OrderingEntry) -> bool:
    if a.lane is not None and a.lane == b.lane:
        if a.p_lon != b.p_lon:
            return a.p_lon > b.p_lon
    elif a.progress != b.progress:
        return a.progress > b.progress
    return a.vehicle_id < b.vehicle_id


def priority_order(entries: Sequence[OrderingEntry]) -> List[int]:
    """
    Deterministic processing order, highest priority first.

    Same-lane pairs: the vehicle further ahead goes first. Cross-lane pairs: the vehicle with
    more predicted longitudinal progress goes first. Ties fall back to the smaller id. The
    pairwise relation is sorted topologically; a cycle is broken at the vehicle with the
    largest progress.
    """
    by_id = {e.vehicle_id: e for e in entries}
    ids = sorted(by_id)
    successors: Dict[int, List[int]] = {i: [] for i in ids}
    indegree = {i: 0 for i in ids}
    for k, i in enumerate(ids):
        for j in ids[k + 1:]:
            first, second = (i, j) if _precedes(by_id[i], by_id[j]) else (j, i)
            successors[first].append(second)
            indegree[second] += 1

    order: List[int] = []
    remaining = set(ids)
    ready = [i for i in ids if indegree[i] == 0]
    heapq.heapify(ready)
    while remaining:
        if not ready:
            pick = max(remaining, key=lambda i: (by_id[i].progress, -i))
            indegree[pick] = 0
            heapq.heappush(ready, pick)
        current = heapq.heappop(ready)
        if current not in remaining:
            continue
        remaining.discard(current)
        order.append(current)
        for nxt in successors[current]:
            if nxt in remaining:
                indegree[nxt] -= 1
                if indegree[nxt] == 0:
                    heapq.heappush(ready, nxt)
    return order


def ordering_entries(states: Mapping[int, Tuple[float, float]], progress: Mapping[int, float],
                     lanes: LaneGeometry) -> List[OrderingEntry]:
    """Build ordering entries from current (p_lon, p_lat) and horizon progress per vehicle."""
    return [
        OrderingEntry(vehicle_id, p_lon, _safe_lane(lanes, p_lat), float(progress[vehicle_id]))
        for vehicle_id, (p_lon, p_lat) in sorted(states.items())
    ]
