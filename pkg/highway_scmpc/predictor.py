"""
Interaction-aware traffic predictor: one IMM filter bank per target vehicle, processed in
priority order so every vehicle is predicted against the already-projected predictions of
the vehicles it has to yield to.

Usage:
    predictor = TrafficPredictor(cfg, gains)
    fans = predictor.step({7: (params, measured_state)}, ego=EgoPlan(ego_params, ego_state))
    fans[7].mu, fans[7].trajectory, fans[7].mode_trajectories
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from highway_scmpc.config import ExperimentConfig
from highway_scmpc.core_types import (
    ALL_MODES, COMMON_INDICES, NUM_MODES, P_LAT, P_LON, R_REF, V_LON, CommonState,
    LaneGeometry, Longitudinal, PolicyMode, VehicleParams,
)
from highway_scmpc.errors import LaneError, OrderingError
from highway_scmpc.imm import (
    ModeBelief, fuse, imm_mix, mode_predict_update, noise_diagonal, pseudo_r_measurement,
    transition_matrix, update_probabilities, validate_transition_matrix,
)
from highway_scmpc.policy_models import GainSet, ModeDynamics, build_mode_dynamics, virtual_leader
from highway_scmpc.projection import (
    LateralHypothesis, LeaderPrediction, ProjectionSettings, clamp_behind, ordering_entries,
    priority_order, project_no_collision,
)
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)

COMMON = list(COMMON_INDICES)


@dataclass
class EgoPlan:
    """The controlled vehicle as traffic sees it: current state and last planned path."""

    params: VehicleParams
    state: CommonState
    trajectory: Optional[np.ndarray] = None


@dataclass
class VehiclePrediction:
    """Prediction fan of one vehicle at the current tick."""

    vehicle_id: int
    params: VehicleParams
    mu: np.ndarray
    trajectory: np.ndarray
    mode_trajectories: Optional[np.ndarray] = None
    covariance: Optional[np.ndarray] = None
    flags: Tuple[str, ...] = ()
    priority: int = 0
    is_ego: bool = False

    @property
    def state(self) -> CommonState:
        return self.common_at(0)

    def common_at(self, t: int, mode_index: Optional[int] = None) -> CommonState:
        rows = self.trajectory if mode_index is None else self.mode_trajectories[mode_index]
        return CommonState.from_array(rows[t, COMMON])

    def lateral_hypotheses(self) -> Tuple[LateralHypothesis, ...]:
        """Lateral paths per target lane, most probable first."""
        if self.mode_trajectories is None:
            return (LateralHypothesis(1.0, self.trajectory[:, P_LAT]),)
        hypotheses = []
        for lane in (1, 2, 3):
            idx = [m.index for m in ALL_MODES if m.target_lane == lane]
            weight = float(self.mu[idx].sum())
            if weight <= 0.0:
                continue
            path = (self.mu[idx] / weight) @ self.mode_trajectories[idx][:, :, P_LAT]
            hypotheses.append((weight, -lane, LateralHypothesis(weight, path)))
        hypotheses.sort(key=lambda item: (item[0], item[1]), reverse=True)
        return tuple(h for _, _, h in hypotheses)

    def leader_view(self) -> LeaderPrediction:
        return LeaderPrediction(
            vehicle_id=self.vehicle_id,
            length=self.params.length,
            width=self.params.width,
            p_lon=self.trajectory[:, P_LON],
            v_lon=self.trajectory[:, V_LON],
            p_lat=self.trajectory[:, P_LAT],
            hypotheses=self.lateral_hypotheses(),
        )

    def to_record(self, digits: int = 6) -> dict:
        return {
            'id': self.vehicle_id,
            'priority': self.priority,
            'mu': {m.label: round(float(self.mu[m.index]), digits) for m in ALL_MODES},
            'p_lon': np.round(self.trajectory[:, P_LON], digits).tolist(),
            'p_lat': np.round(self.trajectory[:, P_LAT], digits).tolist(),
            'flags': list(self.flags),
        }


@dataclass
class _FilterBank:
    params: VehicleParams
    beliefs: List[ModeBelief]
    mu: np.ndarray = field(default_factory=lambda: np.full(NUM_MODES, 1.0 / NUM_MODES))


def _ego_trajectory(plan: EgoPlan, n_steps: int, Tp: float) -> np.ndarray:
    """Ego path as 7 columns (r_ref = v); constant velocity where no plan covers the step."""
    rows = np.zeros((n_steps + 1, 7))
    s = plan.state
    for t in range(n_steps + 1):
        rows[t, COMMON] = [s.p_lon + s.v_lon * t * Tp, s.v_lon, 0.0, s.p_lat, 0.0, 0.0]
    if plan.trajectory is not None:
        planned = np.asarray(plan.trajectory, dtype=float)
        k = min(planned.shape[0], n_steps + 1)
        rows[:k, COMMON] = planned[:k, :6]
        for t in range(k, n_steps + 1):
            last = rows[k - 1]
            rows[t, COMMON] = [last[P_LON] + last[V_LON] * (t - k + 1) * Tp, last[V_LON], 0.0,
                               last[P_LAT], 0.0, 0.0]
    rows[0, COMMON] = s.as_array()
    rows[:, R_REF] = rows[:, V_LON]
    return rows


class TrafficPredictor:
    """
    Per-vehicle IMM filtering and N-step prediction at the filter rate.

    One call to `step` is one filter tick: vehicles are ordered by priority, and each one is
    mixed, updated per mode, predicted over the horizon at the control step, projected
    against higher-priority predictions, re-weighted and fused.
    """

    def __init__(self, cfg: ExperimentConfig, gains: GainSet, horizon: Optional[int] = None):
        f = cfg.filter
        self.T = f.T
        self.Tp = cfg.controller.Tp
        self.stride = cfg.stride
        self.N = horizon or cfg.controller.N
        self.lanes: LaneGeometry = cfg.lanes.geometry()
        self.gains = gains
        self.dk_matrix = cfg.gains.dk_matrix
        self.filter_cfg = f
        self.pi = validate_transition_matrix(f.transition_matrix) if f.transition_matrix \
            else transition_matrix(f.self_transition)
        self.settings = ProjectionSettings(
            tau=f.projection_tau, margin=f.projection_margin,
            weights=tuple(f.projection_weights), big_m=f.projection_big_m,
            rho=f.projection_rho, eps=f.projection_eps,
        )
        self._banks: Dict[int, _FilterBank] = {}
        self._last: Dict[int, VehiclePrediction] = {}
        self._vt_cache: Dict[Tuple[int, int], ModeDynamics] = {}
        self.ego_prediction: Optional[VehiclePrediction] = None

    def reset(self):
        self._banks.clear()
        self._last.clear()
        self.ego_prediction = None

    @property
    def predictions(self) -> Dict[int, VehiclePrediction]:
        return dict(self._last)

    def _vt_dynamics(self, mode: PolicyMode, stride: int) -> ModeDynamics:
        key = (mode.index, stride)
        if key not in self._vt_cache:
            dyn = build_mode_dynamics(mode, self.gains, self.T, self.lanes,
                                      dk_matrix=self.dk_matrix)
            self._vt_cache[key] = dyn if stride == 1 else dyn.compose(stride)
        return self._vt_cache[key]

    def _dynamics(self, mode: PolicyMode, lead: CommonState, stride: int = 1) -> ModeDynamics:
        if mode.longitudinal is Longitudinal.VT:
            return self._vt_dynamics(mode, stride)
        dyn = build_mode_dynamics(mode, self.gains, self.T, self.lanes, lv_state=lead,
                                  dk_matrix=self.dk_matrix)
        return dyn if stride == 1 else dyn.compose(stride)

    def horizon_dynamics(self, mode: PolicyMode, state: CommonState,
                         lead: Optional[VehiclePrediction]) -> List[ModeDynamics]:
        """
        Coarse-step models over the horizon; DK modes follow the lead vehicle's predicted
        path step by step (a virtual leader when `lead` is None).

        Raises:
            OrderingError: the lead vehicle has no prediction covering the horizon
        """
        if mode.longitudinal is Longitudinal.VT:
            return [self._vt_dynamics(mode, self.stride)] * self.N
        if lead is None:
            far = virtual_leader(state, self.filter_cfg.virtual_lv_distance)
            path = [CommonState(far.p_lon + far.v_lon * t * self.Tp, far.v_lon, 0.0,
                                far.p_lat, 0.0, 0.0) for t in range(self.N)]
        else:
            if lead.trajectory.shape[0] < self.N + 1:
                raise OrderingError(f'lead vehicle {lead.vehicle_id} has no prediction over '
                                    f'the {self.N}-step horizon', vehicle_id=lead.vehicle_id)
            path = [lead.common_at(t) for t in range(self.N)]
        return [self._dynamics(mode, lv, self.stride) for lv in path]

    def _lead_for(self, mode: PolicyMode, state: CommonState,
                  higher: List[VehiclePrediction]) -> Optional[VehiclePrediction]:
        best = None
        for pred in higher:
            lead_state = pred.state
            try:
                lane = self.lanes.lane_of(lead_state.p_lat)
            except LaneError:
                continue
            if lane != mode.target_lane or lead_state.p_lon <= state.p_lon:
                continue
            if best is None or (lead_state.p_lon, pred.vehicle_id) < \
                    (best.state.p_lon, best.vehicle_id):
                best = pred
        return best

    def _measurement(self, mode: PolicyMode, meas: CommonState,
                     lead: Optional[VehiclePrediction]) -> np.ndarray:
        if mode.longitudinal is Longitudinal.VT:
            r = pseudo_r_measurement('VT', meas.v_lon, meas.p_lon)
        elif lead is None:
            r = self.filter_cfg.virtual_lv_distance / max(meas.v_lon, 0.1)
        else:
            r = pseudo_r_measurement('DK', meas.v_lon, meas.p_lon,
                                     lead.state.p_lon, lead.state.v_lon)
        return np.array([meas.p_lon, meas.v_lon, meas.a_lon, r,
                         meas.p_lat, meas.v_lat, meas.a_lat])

    def _new_bank(self, params: VehicleParams, measurements: List[np.ndarray]) -> _FilterBank:
        P0 = np.diag(self.filter_cfg.initial_covariance)
        beliefs = [ModeBelief(z=y, P=P0, mu=1.0 / NUM_MODES) for y in measurements]
        logger.debug('Filter bank initialized', extra={'vehicle_id': params.id})
        return _FilterBank(params=params, beliefs=beliefs)

    def step(self, measurements: Mapping[int, Tuple[VehicleParams, CommonState]],
             ego: Optional[EgoPlan] = None) -> Dict[int, VehiclePrediction]:
        """
        Run one filter tick for all measured vehicles.

        Args:
            measurements: vehicle id -> (params, measured common state)
            ego: controlled vehicle; part of the priority order but not filtered

        Returns:
            Prediction fan per target vehicle id
        """
        for vehicle_id in [v for v in self._banks if v not in measurements]:
            del self._banks[vehicle_id]
            self._last.pop(vehicle_id, None)

        positions = {vid: (s.p_lon, s.p_lat) for vid, (_, s) in measurements.items()}
        progress = {vid: self._progress(vid, s) for vid, (_, s) in measurements.items()}
        ego_id = None
        if ego is not None:
            ego_id = ego.params.id
            positions[ego_id] = (ego.state.p_lon, ego.state.p_lat)
            traj = _ego_trajectory(ego, self.N, self.Tp)
            progress[ego_id] = float(traj[-1, P_LON] - traj[0, P_LON])
        order = priority_order(ordering_entries(positions, progress, self.lanes))

        processed: List[VehiclePrediction] = []
        results: Dict[int, VehiclePrediction] = {}
        for rank, vehicle_id in enumerate(order):
            if vehicle_id == ego_id:
                pred = VehiclePrediction(
                    vehicle_id=ego_id, params=ego.params, mu=np.zeros(NUM_MODES),
                    trajectory=_ego_trajectory(ego, self.N, self.Tp), priority=rank,
                    is_ego=True)
                self.ego_prediction = pred
            else:
                params, meas = measurements[vehicle_id]
                pred = self._filter_vehicle(vehicle_id, params, meas, processed, rank)
                results[vehicle_id] = pred
            processed.append(pred)
        self._last = dict(results)
        return results

    def _progress(self, vehicle_id: int, state: CommonState) -> float:
        last = self._last.get(vehicle_id)
        if last is not None and last.trajectory.shape[0] == self.N + 1:
            return float(last.trajectory[-1, P_LON] - last.trajectory[0, P_LON])
        return state.v_lon * self.N * self.Tp

    def _filter_vehicle(self, vehicle_id: int, params: VehicleParams, meas: CommonState,
                        higher: List[VehiclePrediction], rank: int) -> VehiclePrediction:
        f = self.filter_cfg
        leads = [self._lead_for(mode, meas, higher) for mode in ALL_MODES]
        ys = [self._measurement(mode, meas, lead) for mode, lead in zip(ALL_MODES, leads)]

        bank = self._banks.get(vehicle_id)
        if bank is None:
            bank = self._banks[vehicle_id] = self._new_bank(params, ys)
        mixed, c = imm_mix(bank.beliefs, self.pi, mu_floor=f.mu_floor)

        leaders = [p.leader_view() for p in higher]
        residuals, covariances, posteriors, projections = [], [], [], []
        for mode, lead, y, belief in zip(ALL_MODES, leads, ys, mixed):
            is_dk = mode.longitudinal is Longitudinal.DK
            lead_now = lead.state if lead is not None else \
                virtual_leader(meas, f.virtual_lv_distance)
            Q = noise_diagonal(f.process_noise, f.process_noise_r_dk, is_dk)
            R = noise_diagonal(f.measurement_noise, f.measurement_noise_r_dk, is_dk)
            posterior, residual, S = mode_predict_update(
                belief, self._dynamics(mode, lead_now), y, Q, R)

            post_state = CommonState.from_array(posterior.z[COMMON])
            dyns = self.horizon_dynamics(mode, post_state, lead)
            projection = project_no_collision(posterior.z, dyns, params.length, params.width,
                                              leaders, self.lanes, self.settings)
            extra_r, extra_S = projection.residual_augmentation(posterior.P, f.projection_eps)
            residuals.append(np.concatenate([residual, extra_r]))
            cov = np.zeros((S.shape[0] + extra_S.shape[0],) * 2)
            cov[:S.shape[0], :S.shape[0]] = S
            cov[S.shape[0]:, S.shape[0]:] = extra_S
            covariances.append(cov)
            posteriors.append(posterior)
            projections.append(projection)

        mu = update_probabilities(residuals, covariances, c)
        beliefs = []
        for posterior, projection, weight in zip(posteriors, projections, mu):
            z = projection.z.copy()
            z[R_REF] = max(z[R_REF], 0.0)
            beliefs.append(ModeBelief(z=z, P=posterior.P, mu=float(weight)))
        bank.beliefs = beliefs
        bank.mu = mu
        _, covariance = fuse(beliefs, mu)

        mode_trajectories = np.stack([p.trajectory for p in projections])
        fused = np.tensordot(mu, mode_trajectories, axes=1)
        fused = clamp_behind(fused, params.length, leaders, self.lanes,
                             tau=self.settings.tau, margin=self.settings.margin)
        flags = tuple(sorted({f'{m.label}:{flag}' for m, p in zip(ALL_MODES, projections)
                              for flag in p.flags}))
        if any(flag.endswith(':standstill') for flag in flags):
            logger.info('Projection flagged vehicle', extra={'vehicle_id': vehicle_id,
                                                             'flags': list(flags)})
        return VehiclePrediction(
            vehicle_id=vehicle_id, params=params, mu=mu, trajectory=fused,
            mode_trajectories=mode_trajectories, covariance=covariance, flags=flags,
            priority=rank,
        )

