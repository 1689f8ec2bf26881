"""
Vehicle track ingestion for drone-recorded highway datasets (HighD `*_tracks.csv` subset).

Rows give the bounding box's upper-left corner (x, y), its extent (width along the road,
height across it), velocities and accelerations. Ingestion converts them to
center-referenced CommonStates in the road frame through the configured affine transform:

    p_lon = x_scale * (x + width / 2) + x_offset      v_lon, a_lon scaled by x_scale
    p_lat = y_scale * (y + height / 2) + y_offset     v_lat, a_lat scaled by y_scale

Vehicle length is the box width, vehicle width the box height.

Usage:
    store = ingest_tracks('data/01_tracks.csv', transform=TrackTransform.from_config(cfg))
    store.state_at(vehicle_id=12, frame=250)
    store.vehicles_at(250, exclude=(12,))
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from highway_scmpc.core_types import CommonState, LaneGeometry, Vehicle, VehicleParams
from highway_scmpc.errors import LaneError, TrackFormatError
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)

REQUIRED_COLUMNS = ('frame', 'id', 'x', 'y', 'xVelocity', 'yVelocity', 'xAcceleration',
                    'yAcceleration', 'laneId', 'width', 'height')

# Native sampling interval of the recordings (25 Hz)
FRAME_INTERVAL = 0.04


@dataclass(frozen=True)
class TrackTransform:
    x_scale: float = 1.0
    x_offset: float = 0.0
    y_scale: float = 1.0
    y_offset: float = 0.0

    @classmethod
    def from_config(cls, cfg) -> 'TrackTransform':
        sim = cfg.simulation
        return cls(sim.x_scale, sim.x_offset, sim.y_scale, sim.y_offset)


@dataclass(frozen=True)
class Track:
    """Contiguous time series of one vehicle."""

    params: VehicleParams
    first_frame: int
    states: np.ndarray      # (frames, 6) common states in the road frame
    lane_ids: np.ndarray    # recorded laneId, informational only

    @property
    def last_frame(self) -> int:
        return self.first_frame + len(self.states) - 1

    def covers(self, frame: int) -> bool:
        return self.first_frame <= frame <= self.last_frame


class TrackStore:
    """Tracks indexed by vehicle id with O(1) lookup per frame."""

    def __init__(self, tracks: Dict[int, Track], source: Optional[str] = None):
        self.tracks = dict(sorted(tracks.items()))
        self.source = source

    def __len__(self):
        return len(self.tracks)

    def __contains__(self, vehicle_id: int) -> bool:
        return vehicle_id in self.tracks

    @property
    def ids(self) -> Tuple[int, ...]:
        return tuple(self.tracks)

    def has(self, vehicle_id: int, frame: int) -> bool:
        track = self.tracks.get(vehicle_id)
        return track is not None and track.covers(frame)

    def _track(self, vehicle_id: int) -> Track:
        try:
            return self.tracks[vehicle_id]
        except KeyError:
            raise TrackFormatError(f'vehicle {vehicle_id} is not in the track file',
                                   vehicle_id=vehicle_id)

    def params_of(self, vehicle_id: int) -> VehicleParams:
        return self._track(vehicle_id).params

    def state_at(self, vehicle_id: int, frame: int) -> CommonState:
        track = self._track(vehicle_id)
        if not track.covers(frame):
            raise TrackFormatError(
                f'vehicle {vehicle_id} has no record at frame {frame} '
                f'(frames {track.first_frame}..{track.last_frame})',
                vehicle_id=vehicle_id, frame=frame)
        return CommonState.from_array(track.states[frame - track.first_frame])

    def vehicle_at(self, vehicle_id: int, frame: int) -> Vehicle:
        return Vehicle(self.params_of(vehicle_id), self.state_at(vehicle_id, frame))

    def vehicles_at(self, frame: int, exclude: Sequence[int] = (),
                    lanes: Optional[LaneGeometry] = None) -> List[Vehicle]:
        """
        Vehicles recorded at `frame`, in id order.

        With `lanes`, vehicles outside the road span or driving backwards are skipped.
        """
        out = []
        for vid, track in self.tracks.items():
            if vid in exclude or not track.covers(frame):
                continue
            vehicle = Vehicle(track.params, CommonState.from_array(
                track.states[frame - track.first_frame]))
            if lanes is not None:
                try:
                    lanes.lane_of(vehicle.state.p_lat)
                except LaneError:
                    logger.debug('Skipping off-road vehicle',
                                 extra={'vehicle_id': vid, 'frame': frame,
                                        'p_lat': vehicle.state.p_lat})
                    continue
                if vehicle.state.v_lon < 0.0:
                    logger.debug('Skipping vehicle driving against the road frame',
                                 extra={'vehicle_id': vid, 'frame': frame})
                    continue
            out.append(vehicle)
        return out


def _line(index) -> int:
    # header is line 1
    return int(index) + 2


def _read_frame(path: Path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype=str, skipinitialspace=True)
    except FileNotFoundError:
        raise TrackFormatError(f'track file not found: {path}')
    except (pd.errors.EmptyDataError, pd.errors.ParserError) as e:
        raise TrackFormatError(f'{path}: unreadable CSV: {e}')

    missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
    if missing:
        raise TrackFormatError(f'{path}: missing columns: {", ".join(missing)}', line=1,
                               missing=missing)

    df = df[list(REQUIRED_COLUMNS)].copy()
    for column in REQUIRED_COLUMNS:
        raw = df[column]
        values = pd.to_numeric(raw, errors='coerce')
        bad = ~np.isfinite(values.astype(float))
        if bad.any():
            index = bad[bad].index[0]
            raise TrackFormatError(
                f'{path}: column {column!r} has non-numeric value {raw[index]!r}',
                line=_line(index), column=column)
        df[column] = values
    for column in ('frame', 'id', 'laneId'):
        fractional = df[column] != np.floor(df[column])
        if fractional.any():
            index = fractional[fractional].index[0]
            raise TrackFormatError(f'{path}: column {column!r} must hold integers',
                                   line=_line(index), column=column)
        df[column] = df[column].astype(np.int64)
    return df


def _check_contiguous(path: Path, vid: int, group: pd.DataFrame):
    step = np.diff(group['frame'].to_numpy())
    broken = np.flatnonzero(step != 1)
    if broken.size:
        index = group.index[broken[0] + 1]
        previous = int(group['frame'].iloc[broken[0]])
        current = int(group['frame'].iloc[broken[0] + 1])
        kind = 'frame gap' if current > previous else 'non-monotone frames'
        raise TrackFormatError(
            f'{path}: {kind} for vehicle {vid}: frame {current} follows {previous}',
            line=_line(index), vehicle_id=vid)


def _to_track(vid: int, group: pd.DataFrame, transform: TrackTransform,
              path: Path) -> Track:
    length = group['width'].to_numpy(dtype=float)
    width = group['height'].to_numpy(dtype=float)
    if (length <= 0).any() or (width <= 0).any():
        index = group.index[int(np.flatnonzero((length <= 0) | (width <= 0))[0])]
        raise TrackFormatError(f'{path}: vehicle {vid} has a non-positive extent',
                               line=_line(index), vehicle_id=vid)
    sx, sy = transform.x_scale, transform.y_scale
    states = np.column_stack([
        sx * (group['x'].to_numpy(dtype=float) + length / 2.0) + transform.x_offset,
        sx * group['xVelocity'].to_numpy(dtype=float),
        sx * group['xAcceleration'].to_numpy(dtype=float),
        sy * (group['y'].to_numpy(dtype=float) + width / 2.0) + transform.y_offset,
        sy * group['yVelocity'].to_numpy(dtype=float),
        sy * group['yAcceleration'].to_numpy(dtype=float),
    ])
    # extent is constant in the recordings; the first row is authoritative
    params = VehicleParams(vid, float(length[0]), float(width[0]))
    return Track(params, int(group['frame'].iloc[0]), states,
                 group['laneId'].to_numpy(dtype=np.int64))


def ingest_tracks(path: Union[str, Path],
                  transform: Optional[TrackTransform] = None) -> TrackStore:
    """
    Parse a track CSV into a TrackStore.

    Args:
        path: CSV with at least the columns in REQUIRED_COLUMNS (extra columns are ignored)
        transform: dataset-to-road-frame affine map (identity by default)

    Raises:
        TrackFormatError: missing columns, non-numeric cells, frame gaps or non-monotone
            frames; `line` holds the 1-based line of the offending row
    """
    path = Path(path)
    transform = transform or TrackTransform()
    df = _read_frame(path)

    tracks = {}
    for vid, group in df.groupby('id', sort=True):
        vid = int(vid)
        _check_contiguous(path, vid, group)
        tracks[vid] = _to_track(vid, group, transform, path)

    logger.info('Tracks ingested',
                extra={'path': str(path), 'vehicles': len(tracks), 'rows': len(df)})
    return TrackStore(tracks, source=str(path))
