"""
Shared domain vocabulary: kinematic states, policy modes, vehicles, lanes and scenes.

States are laid out as numpy-friendly value objects. The longitudinal axis grows in the
driving direction, the lateral axis follows the road frame configured in LaneGeometry,
and every vehicle's reference point is its geometric center.

Usage:
    lanes = LaneGeometry((22.98, 26.88, 31.3), l_lb=21.0, l_ub=33.8)
    ego = CommonState(2.84, 34.8, 0.27, 25.65, -0.09, -0.01)
    lane_of(ego, lanes)            # -> 2
    jerk_step(ego, (0.0, 0.0), 0.4)
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterable, Optional, Sequence, Tuple

import numpy as np

from highway_scmpc.errors import LaneError, ModelError

# Column layout of the 7-dim filter state
P_LON, V_LON, A_LON, R_REF, P_LAT, V_LAT, A_LAT = range(7)
COMMON_INDICES = (P_LON, V_LON, A_LON, P_LAT, V_LAT, A_LAT)


@dataclass(frozen=True)
class CommonState:
    """Six-dimensional kinematic state [p, v, a] longitudinal then lateral."""

    p_lon: float
    v_lon: float
    a_lon: float
    p_lat: float
    v_lat: float
    a_lat: float

    def __post_init__(self):
        for name in ('p_lon', 'v_lon', 'a_lon', 'p_lat', 'v_lat', 'a_lat'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise ModelError(f'{name} must be finite, got {value}')
            object.__setattr__(self, name, value)

    def validate_forward(self):
        """Check the forward-driving assumption (v_lon >= 0)."""
        if self.v_lon < 0.0:
            raise ModelError(f'v_lon must be >= 0 for forward driving, got {self.v_lon}')
        return self

    def as_array(self) -> np.ndarray:
        return np.array([self.p_lon, self.v_lon, self.a_lon,
                         self.p_lat, self.v_lat, self.a_lat], dtype=float)

    @classmethod
    def from_array(cls, values) -> 'CommonState':
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (6,):
            raise ModelError(f'common state needs 6 entries, got {values.shape}')
        return cls(*values.tolist())

    @property
    def lon(self) -> np.ndarray:
        return np.array([self.p_lon, self.v_lon, self.a_lon])

    @property
    def lat(self) -> np.ndarray:
        return np.array([self.p_lat, self.v_lat, self.a_lat])


@dataclass(frozen=True)
class FullState:
    """Filter state [x_lon | r_ref | x_lat]; r_ref is m/s for VT and s for DK."""

    common: CommonState
    r_ref: float

    def __post_init__(self):
        r_ref = float(self.r_ref)
        if not math.isfinite(r_ref) or r_ref < 0.0:
            raise ModelError(f'r_ref must be finite and >= 0, got {r_ref}')
        object.__setattr__(self, 'r_ref', r_ref)

    def as_array(self) -> np.ndarray:
        c = self.common
        return np.array([c.p_lon, c.v_lon, c.a_lon, self.r_ref,
                         c.p_lat, c.v_lat, c.a_lat], dtype=float)

    @classmethod
    def from_array(cls, values) -> 'FullState':
        values = np.asarray(values, dtype=float).ravel()
        if values.shape != (7,):
            raise ModelError(f'full state needs 7 entries, got {values.shape}')
        return cls(CommonState.from_array(values[list(COMMON_INDICES)]), max(values[R_REF], 0.0))


class Longitudinal(str, Enum):
    VT = 'VT'  # velocity tracking
    DK = 'DK'  # distance keeping behind the lead vehicle


@dataclass(frozen=True)
class PolicyMode:
    longitudinal: Longitudinal
    target_lane: int

    def __post_init__(self):
        object.__setattr__(self, 'longitudinal', Longitudinal(self.longitudinal))
        if self.target_lane not in (1, 2, 3):
            raise LaneError(f'policy target lane must be 1, 2 or 3, got {self.target_lane}')

    @property
    def index(self) -> int:
        offset = 0 if self.longitudinal is Longitudinal.VT else 3
        return offset + self.target_lane - 1

    @property
    def label(self) -> str:
        return f'{self.longitudinal.value}-{self.target_lane}'

    @classmethod
    def from_label(cls, label: str) -> 'PolicyMode':
        longitudinal, lane = label.split('-')
        return cls(Longitudinal(longitudinal), int(lane))

    def __str__(self):
        return self.label


ALL_MODES: Tuple[PolicyMode, ...] = tuple(
    PolicyMode(longitudinal, lane)
    for longitudinal in (Longitudinal.VT, Longitudinal.DK)
    for lane in (1, 2, 3)
)
NUM_MODES = len(ALL_MODES)


@dataclass(frozen=True)
class ControlMode:
    """Ego control mode: lane keeping (no target) or a change into `target_lane`."""

    target_lane: Optional[int] = None

    @property
    def lane_change(self) -> bool:
        return self.target_lane is not None

    @property
    def label(self) -> str:
        return 'lane-keep' if self.target_lane is None else f'lane-change-{self.target_lane}'

    def terminal_lane(self, current_lane: int) -> int:
        return current_lane if self.target_lane is None else self.target_lane

    @classmethod
    def from_label(cls, label: str) -> 'ControlMode':
        if label == 'lane-keep':
            return cls()
        if label.startswith('lane-change-'):
            return cls(int(label.rsplit('-', 1)[1]))
        raise ModelError(f'unknown control mode {label!r}')

    def __str__(self):
        return self.label


LANE_KEEP = ControlMode()


@dataclass(frozen=True)
class VehicleParams:
    id: int
    length: float
    width: float

    def __post_init__(self):
        if not (self.length > 0.0 and self.width > 0.0):
            raise ModelError(f'vehicle {self.id}: length and width must be positive')


@dataclass(frozen=True)
class LaneGeometry:
    """
    Three straight lanes. `centerlines[i]` is the centerline of lane i + 1; the road
    spans [l_lb, l_ub]. Lane boundaries are the midpoints between adjacent centerlines.
    """

    centerlines: Tuple[float, ...] = (22.98, 26.88, 31.3)
    l_lb: float = 21.0
    l_ub: float = 33.8

    def __post_init__(self):
        centers = tuple(float(c) for c in self.centerlines)
        object.__setattr__(self, 'centerlines', centers)
        if len(centers) != 3:
            raise LaneError(f'exactly three lanes are supported, got {len(centers)}')
        ordered = (self.l_lb,) + centers + (self.l_ub,)
        if any(b <= a for a, b in zip(ordered, ordered[1:])):
            raise LaneError(f'lane geometry not ordered: {ordered}')

    @property
    def lanes(self) -> Tuple[int, ...]:
        return tuple(range(1, len(self.centerlines) + 1))

    def centerline(self, lane: int) -> float:
        if lane not in self.lanes:
            raise LaneError(f'unknown lane {lane}')
        return self.centerlines[lane - 1]

    @property
    def boundaries(self) -> Tuple[float, ...]:
        return tuple((a + b) / 2.0 for a, b in zip(self.centerlines, self.centerlines[1:]))

    def span(self, lane: int) -> Tuple[float, float]:
        """Lateral interval [lower, upper) occupied by a lane."""
        self.centerline(lane)
        edges = (self.l_lb,) + self.boundaries + (self.l_ub,)
        return edges[lane - 1], edges[lane]

    def lane_of(self, p_lat: float) -> int:
        if not (self.l_lb <= p_lat <= self.l_ub):
            raise LaneError(f'lateral position {p_lat:.3f} outside road [{self.l_lb}, {self.l_ub}]')
        lane = 1
        for boundary in self.boundaries:
            # half-open: a position on a boundary, up to round-off, belongs to the upper lane
            if p_lat >= boundary - 1e-9:
                lane += 1
        return lane

    def lanes_overlapped(self, p_lat: float, half_width: float) -> Tuple[int, ...]:
        """Lanes touched by the lateral extent [p_lat - half_width, p_lat + half_width]."""
        low = max(p_lat - half_width, self.l_lb)
        high = min(p_lat + half_width, self.l_ub)
        return tuple(
            lane for lane in self.lanes
            if self.span(lane)[0] < high and low < self.span(lane)[1]
        ) or (self.lane_of(min(max(p_lat, self.l_lb), self.l_ub)),)

    def adjacent(self, lane: int) -> Tuple[int, ...]:
        self.centerline(lane)
        return tuple(l for l in (lane - 1, lane + 1) if l in self.lanes)


def lane_of(state: CommonState, lanes: LaneGeometry) -> int:
    """Lane index whose half-open interval contains the state's lateral position."""
    return lanes.lane_of(state.p_lat)


@dataclass(frozen=True)
class Vehicle:
    params: VehicleParams
    state: CommonState

    @property
    def id(self) -> int:
        return self.params.id


@dataclass(frozen=True)
class SceneSnapshot:
    time: float
    ego: Optional[Vehicle]
    targets: Tuple[Vehicle, ...] = field(default_factory=tuple)
    lanes: LaneGeometry = field(default_factory=LaneGeometry)

    def __post_init__(self):
        object.__setattr__(self, 'targets', tuple(self.targets))
        ids = [v.id for v in self.vehicles]
        if len(ids) != len(set(ids)):
            raise ModelError(f'duplicate vehicle ids in scene: {sorted(ids)}')
        for vehicle in self.vehicles:
            vehicle.state.validate_forward()

    @property
    def vehicles(self) -> Tuple[Vehicle, ...]:
        return ((self.ego,) if self.ego is not None else ()) + self.targets

    def by_id(self) -> Dict[int, Vehicle]:
        return {v.id: v for v in self.vehicles}


def jerk_matrices(Tp: float) -> Tuple[np.ndarray, np.ndarray]:
    """Per-axis triple-integrator (A, B) of the jerk model."""
    if not Tp > 0.0:
        raise ModelError(f'time step must be positive, got {Tp}')
    A = np.array([[1.0, Tp, Tp ** 2 / 2.0],
                  [0.0, 1.0, Tp],
                  [0.0, 0.0, 1.0]])
    B = np.array([Tp ** 3 / 6.0, Tp ** 2 / 2.0, Tp])
    return A, B


def ego_matrices(Tp: float) -> Tuple[np.ndarray, np.ndarray]:
    """Block-diagonal (A_bar 6x6, B_bar 6x2) acting on [x_lon, x_lat] with u = [j_lon, j_lat]."""
    A, B = jerk_matrices(Tp)
    A_bar = np.zeros((6, 6))
    A_bar[:3, :3] = A
    A_bar[3:, 3:] = A
    B_bar = np.zeros((6, 2))
    B_bar[:3, 0] = B
    B_bar[3:, 1] = B
    return A_bar, B_bar


def jerk_step(state: CommonState, u: Sequence[float], Tp: float) -> CommonState:
    """Exact jerk-model update; linear, no clamping."""
    A_bar, B_bar = ego_matrices(Tp)
    x_next = A_bar @ state.as_array() + B_bar @ np.asarray(u, dtype=float)
    return CommonState.from_array(x_next)


def safety_offset(length_a: float, length_b: float, margin: float = 0.0) -> float:
    """Minimum center-to-center distance: half the summed lengths plus a margin."""
    return (length_a + length_b) / 2.0 + margin


def vehicles_overlap(a: Vehicle, b: Vehicle) -> bool:
    """Axis-aligned rectangle overlap in the road frame."""
    dx = abs(a.state.p_lon - b.state.p_lon)
    dy = abs(a.state.p_lat - b.state.p_lat)
    return (dx < (a.params.length + b.params.length) / 2.0
            and dy < (a.params.width + b.params.width) / 2.0)


def nearest_ahead(vehicles: Iterable[Vehicle], p_lon: float, lane: int,
                  lanes: LaneGeometry) -> Optional[Vehicle]:
    """Closest vehicle strictly ahead of p_lon whose center is in `lane`."""
    best = None
    for vehicle in vehicles:
        if vehicle.state.p_lon <= p_lon or lanes.lane_of(vehicle.state.p_lat) != lane:
            continue
        if best is None or (vehicle.state.p_lon, vehicle.id) < (best.state.p_lon, best.id):
            best = vehicle
    return best
