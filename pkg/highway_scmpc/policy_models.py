"""
Per-mode closed-loop motion models of the traffic participants.

Each policy mode is a linear feedback law wrapped around the triple integrator:
velocity tracking (VT) or distance keeping (DK) longitudinally, centerline tracking
laterally. The resulting affine system z' = F z + E acts on the 7-dim filter state
[p, v, a, r_ref, p_lat, v_lat, a_lat].

Usage:
    gains = synthesize_gains(GainWeights(), T=0.04, k_lat=(1.15, 3.39, 3.58))
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, 0.04, lanes)
    z_next = dyn.step(z)
"""

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg

from highway_scmpc.core_types import CommonState, LaneGeometry, Longitudinal, PolicyMode
from highway_scmpc.errors import LaneError, ModelError, SynthesisError
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class GainWeights:
    """LQR weights per channel: diagonal state weights on [p, v, a] and an input weight."""

    lon_state: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lon_input: float = 10.0
    lat_state: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    lat_input: float = 10.0


@dataclass(frozen=True)
class GainSet:
    k_lon_vt: np.ndarray
    k_lon_dk: np.ndarray
    k_lat: np.ndarray

    def spectral_radii(self, T: float):
        """Closed-loop spectral radius per channel at sampling time T."""
        A3, B3 = _triple_integrator(T)
        A2, B2 = _velocity_subsystem(T)
        vt = A2 - np.outer(B2, self.k_lon_vt[1:])
        return {
            'k_lon_vt': _spectral_radius(vt),
            'k_lon_dk': _spectral_radius(A3 - np.outer(B3, self.k_lon_dk)),
            'k_lat': _spectral_radius(A3 - np.outer(B3, self.k_lat)),
        }

    def validate(self, T: float) -> 'GainSet':
        for name, radius in self.spectral_radii(T).items():
            if not radius < 1.0:
                raise SynthesisError(f'{name} does not stabilize the closed loop '
                                     f'(spectral radius {radius:.6f})', gain=name)
        return self


def _triple_integrator(T):
    A = np.array([[1.0, T, T ** 2 / 2.0],
                  [0.0, 1.0, T],
                  [0.0, 0.0, 1.0]])
    B = np.array([T ** 3 / 6.0, T ** 2 / 2.0, T])
    return A, B


def _velocity_subsystem(T):
    # (v, a) part of the integrator; VT feedback never acts on position
    A = np.array([[1.0, T], [0.0, 1.0]])
    B = np.array([T ** 2 / 2.0, T])
    return A, B


def _spectral_radius(M):
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def dlqr(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray) -> np.ndarray:
    """
    Discrete LQR gain K for u = -K x.

    Args:
        A, B: system matrices (B as 1-d array for single input)
        Q, R: state and input weights

    Returns:
        Gain row as a 1-d array

    Raises:
        SynthesisError: the Riccati equation has no stabilizing solution
    """
    B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
    R = np.atleast_2d(np.asarray(R, dtype=float))
    try:
        P = linalg.solve_discrete_are(A, B, Q, R)
        K = linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    except (ValueError, np.linalg.LinAlgError, linalg.LinAlgError) as e:
        raise SynthesisError(f'Riccati synthesis failed: {e}')
    if not np.all(np.isfinite(K)):
        raise SynthesisError('Riccati synthesis produced non-finite gains')
    return K.ravel()


def synthesize_gains(weights: GainWeights, T: float,
                     k_lon_vt: Optional[Sequence[float]] = None,
                     k_lon_dk: Optional[Sequence[float]] = None,
                     k_lat: Optional[Sequence[float]] = None) -> GainSet:
    """
    Build the feedback gains of all policy channels.

    Explicit gains bypass synthesis for their channel. The VT gain is synthesized on the
    (v, a) subsystem, so its position entry is zero.

    Raises:
        SynthesisError: non-positive weights, failed synthesis or a non-stabilizing gain
    """
    if not T > 0.0:
        raise SynthesisError(f'sampling time must be positive, got {T}')
    for name in ('lon_state', 'lat_state'):
        values = np.asarray(getattr(weights, name), dtype=float)
        if values.shape != (3,) or np.any(values < 0.0):
            raise SynthesisError(f'{name} weights must be 3 non-negative values')
    if not (weights.lon_input > 0.0 and weights.lat_input > 0.0):
        raise SynthesisError('input weights must be positive')

    A3, B3 = _triple_integrator(T)
    if k_lon_vt is None:
        A2, B2 = _velocity_subsystem(T)
        k2 = dlqr(A2, B2, np.diag(weights.lon_state[1:]), weights.lon_input)
        k_lon_vt = np.concatenate([[0.0], k2])
    if k_lon_dk is None:
        k_lon_dk = dlqr(A3, B3, np.diag(weights.lon_state), weights.lon_input)
    if k_lat is None:
        k_lat = dlqr(A3, B3, np.diag(weights.lat_state), weights.lat_input)

    gains = GainSet(np.asarray(k_lon_vt, dtype=float), np.asarray(k_lon_dk, dtype=float),
                    np.asarray(k_lat, dtype=float))
    gains.validate(T)
    logger.debug('Policy gains ready', extra={
        'k_lon_vt': gains.k_lon_vt, 'k_lon_dk': gains.k_lon_dk, 'k_lat': gains.k_lat})
    return gains


@dataclass(frozen=True)
class ModeDynamics:
    """
    Affine policy-mode model z' = F z + E + frame_offset.

    F and E follow the printed block structure. For DK modes E maps into the lead
    vehicle's moving frame; `frame_offset` is the lead vehicle's own constant-acceleration
    step, which turns the update back into absolute coordinates.
    """

    F: np.ndarray
    E: np.ndarray
    mode: PolicyMode
    depends_on_lv: bool = False
    frame_offset: np.ndarray = field(default_factory=lambda: np.zeros(7))
    lead_state: Optional[np.ndarray] = None
    lead_matrix: Optional[np.ndarray] = None
    T: float = 0.0

    @property
    def offset(self) -> np.ndarray:
        return self.E + self.frame_offset

    def step(self, z: np.ndarray) -> np.ndarray:
        return self.F @ z + self.offset

    def _offset_for(self, lead: np.ndarray) -> np.ndarray:
        A3, _ = _triple_integrator(self.T)
        offset = self.E.copy()
        offset[:4] = self.lead_matrix @ np.append(lead, 0.0)
        offset[:3] += A3 @ lead
        return offset

    def compose(self, stride: int) -> 'ModeDynamics':
        """
        Equivalent single step of `stride` applications: (F^s, sum F^k offset_k).

        For DK modes the lead vehicle advances at constant acceleration between the
        sub-steps, so offset_k follows it.
        """
        if stride < 1:
            raise ModelError(f'stride must be >= 1, got {stride}')
        F_total = np.eye(7)
        offset = np.zeros(7)
        lead = self.lead_state
        A3, _ = _triple_integrator(self.T) if lead is not None else (None, None)
        for _ in range(stride):
            step_offset = self.offset if lead is None else self._offset_for(lead)
            offset = self.F @ offset + step_offset
            F_total = self.F @ F_total
            if lead is not None:
                lead = A3 @ lead
        return replace(self, F=F_total, E=offset, frame_offset=np.zeros(7),
                       lead_state=None, lead_matrix=None)


def virtual_leader(state: CommonState, distance: float) -> CommonState:
    """Stand-in lead vehicle far ahead at the follower's speed."""
    return CommonState(state.p_lon + distance, state.v_lon, 0.0, state.p_lat, 0.0, 0.0)


def _f_lon_vt(k, T):
    k2, k3 = k[1], k[2]
    return np.array([
        [1.0, T, T ** 2 / 2.0, 0.0],
        [0.0, 1.0 - k2 * T ** 2 / 2.0, T - k3 * T ** 2 / 2.0, k2 * T ** 2 / 2.0],
        [0.0, -k2 * T, 1.0 - k3 * T, k2 * T],
        [0.0, 0.0, 0.0, 1.0],
    ])


def _f_lon_dk(k, T, v_lead, variant):
    k1, k2, k3 = k
    # the a-row gain on r: printed with K2, K1 keeps the gap term consistent
    k_ar = k2 if variant == 'as-printed' else k1
    printed = np.array([
        [1.0 - k1 * T ** 3 / 6.0, -k1 * T ** 2 / 2.0, -k1 * T, 0.0],
        [T - k2 * T ** 3 / 6.0, 1.0 - k2 * T ** 2 / 2.0, -k2 * T, 0.0],
        [T ** 2 / 2.0 - k3 * T ** 3 / 6.0, T - k3 * T ** 2 / 2.0, 1.0 - k3 * T, 0.0],
        [-k1 * v_lead * T ** 3 / 6.0, -k1 * v_lead * T ** 2 / 2.0, -k_ar * v_lead * T, 1.0],
    ])
    return printed.T


def _e_lon_dk_matrix(k, T):
    k1, k2, k3 = k
    return np.array([
        [k1 * T ** 3 / 6.0 - 1.0, k2 * T ** 3 / 6.0 - T, k3 * T ** 3 / 6.0 - T ** 2 / 2.0, 0.0],
        [k1 * T ** 2 / 2.0, k2 * T ** 2 / 2.0 - 1.0, k3 * T ** 2 / 2.0 - T, 0.0],
        [k1 * T, k2 * T, k3 * T - 1.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
    ])


def build_mode_dynamics(mode: PolicyMode, gains: GainSet, T: float, lanes: LaneGeometry,
                        lv_state: Optional[CommonState] = None,
                        dk_matrix: str = 'as-printed') -> ModeDynamics:
    """
    Assemble F and E of one policy mode at sampling time T.

    Args:
        mode: policy mode (longitudinal policy and target lane)
        gains: feedback gains
        T: sampling time of the model
        lanes: lane geometry providing the target centerline
        lv_state: lead vehicle state; required for DK modes (pass `virtual_leader(...)`
            when the lane ahead is empty)
        dk_matrix: 'as-printed' or 'symmetric-k1' variant of the DK r-coupling

    Raises:
        LaneError: unknown target lane
        ModelError: DK mode without a lead vehicle
    """
    if mode.target_lane not in lanes.lanes:
        raise LaneError(f'unknown target lane {mode.target_lane}')
    p_target = lanes.centerline(mode.target_lane)

    A3, B3 = _triple_integrator(T)
    F = np.zeros((7, 7))
    E = np.zeros(7)
    frame = np.zeros(7)
    lead = None
    lead_matrix = None

    if mode.longitudinal is Longitudinal.VT:
        F[:4, :4] = _f_lon_vt(gains.k_lon_vt, T)
    else:
        if lv_state is None:
            raise ModelError(f'{mode.label} needs a lead vehicle state')
        lead = lv_state.lon
        lead_matrix = _e_lon_dk_matrix(gains.k_lon_dk, T)
        F[:4, :4] = _f_lon_dk(gains.k_lon_dk, T, lv_state.v_lon, dk_matrix)
        E[:4] = lead_matrix @ np.append(lead, 0.0)
        frame[:3] = A3 @ lead

    F[4:, 4:] = A3 - np.outer(B3, gains.k_lat)
    E[4:] = B3 * gains.k_lat[0] * p_target

    return ModeDynamics(F=F, E=E, mode=mode,
                        depends_on_lv=mode.longitudinal is Longitudinal.DK,
                        frame_offset=frame, lead_state=lead, lead_matrix=lead_matrix, T=T)
