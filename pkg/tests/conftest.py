import copy
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from highway_scmpc.config import load_config
from highway_scmpc.core_types import (
    CommonState, LaneGeometry, SceneSnapshot, Vehicle, VehicleParams,
)
from highway_scmpc.policy_models import GainWeights, synthesize_gains

REPO_ROOT = Path(__file__).resolve().parent.parent
CONFIG_DIR = REPO_ROOT / 'configs'

K_LAT = (1.15, 3.39, 3.58)

# Case-1 initial states in the road frame
CASE1_EGO = (2.84, 34.8, 0.27, 25.65, -0.09, -0.01)
CASE1_TV1 = (127.87, 32.74, 0.13, 21.52, -0.21, 0.2)
CASE1_TV2 = (141.19, 23.04, 0.05, 25.42, 0.1, -0.03)

TRACK_COLUMNS = ['frame', 'id', 'x', 'y', 'width', 'height', 'xVelocity', 'yVelocity',
                 'xAcceleration', 'yAcceleration', 'laneId']

@pytest.fixture(autouse=True)
def _isolated_env(monkeypatch):
    for name in ('SCMPC_CONFIG', 'SCMPC_OUT_DIR', 'SCMPC_SEED', 'SCMPC_HOST', 'SCMPC_PORT'):
        monkeypatch.delenv(name, raising=False)
    monkeypatch.setenv('LOG_LEVEL', 'CRITICAL')


@pytest.fixture
def lanes():
    return LaneGeometry()


@pytest.fixture(scope='session')
def gains():
    return synthesize_gains(GainWeights(), 0.04, k_lat=K_LAT)


@pytest.fixture
def case1_path():
    return CONFIG_DIR / 'case1.json'


@pytest.fixture
def case1_config(case1_path):
    return load_config(case1_path)


@pytest.fixture
def case2_config():
    return load_config(CONFIG_DIR / 'case2.json')


@pytest.fixture
def empty_road_config():
    return load_config(CONFIG_DIR / 'empty_road.json')


@pytest.fixture
def case1_document(case1_path):
    import json

    with open(case1_path) as f:
        return json.load(f)


def make_vehicle(vid, state, length=4.85, width=2.02):
    return Vehicle(VehicleParams(vid, length, width), CommonState(*state))


@pytest.fixture
def case1_scene(lanes):
    return SceneSnapshot(
        time=0.0,
        ego=make_vehicle(0, CASE1_EGO),
        targets=(make_vehicle(1, CASE1_TV1, 5.96, 2.32), make_vehicle(2, CASE1_TV2, 14.35, 2.5)),
        lanes=lanes,
    )


def track_rows(vid, first_frame, state, n_frames, length, width, lane_id=2, dt=0.04):
    """Constant-velocity rows of one vehicle; `state` is its center-referenced CommonState."""
    p, v, a, y, vy, ay = state
    rows = []
    for k in range(n_frames):
        center = p + v * k * dt
        rows.append({
            'frame': first_frame + k, 'id': vid,
            'x': center - length / 2.0, 'y': y - width / 2.0,
            'width': length, 'height': width,
            'xVelocity': v, 'yVelocity': vy, 'xAcceleration': a, 'yAcceleration': ay,
            'laneId': lane_id,
        })
    return rows


@pytest.fixture
def write_tracks(tmp_path):
    """Write rows (dicts) as a track CSV; returns its path."""
    def _write(rows, name='tracks.csv', columns=None):
        path = tmp_path / name
        frame = pd.DataFrame(rows, columns=columns or TRACK_COLUMNS)
        frame.to_csv(path, index=False)
        return path
    return _write


@pytest.fixture
def case1_tracks(write_tracks):
    rows = track_rows(0, 100, CASE1_EGO, 60, 4.85, 2.02)
    rows += track_rows(1, 100, CASE1_TV1, 60, 5.96, 2.32, lane_id=1)
    rows += track_rows(2, 100, CASE1_TV2, 60, 14.35, 2.5)
    return write_tracks(rows)


def with_overrides(cfg, **sections):
    """Deep copy of a config with attributes replaced per section."""
    out = copy.deepcopy(cfg)
    for section, values in sections.items():
        for key, value in values.items():
            setattr(getattr(out, section), key, value)
    return out


def constant_velocity_path(state, N, Tp):
    """(N+1, 6) common-state path at constant velocity, lateral held."""
    p, v, _, y, _, _ = state
    rows = np.zeros((N + 1, 6))
    rows[:, 0] = p + v * Tp * np.arange(N + 1)
    rows[:, 1] = v
    rows[:, 3] = y
    return rows
