import json
import os

import numpy as np
import pandas as pd
import pytest

from conftest import CASE1_EGO, with_overrides
from highway_scmpc.config import VehicleSpec, load_config, validate_config
from highway_scmpc.errors import CollisionError
from highway_scmpc.simulation import (
    ScriptedTraffic, _shifted_plan, bench, build_gains, random_scene, run_closed_loop,
    run_predict, step_records, write_jsonl, write_outputs,
)

FULL = os.environ.get('SCMPC_FULL_ACCEPTANCE') == '1'


def test_empty_road_cruises_in_lane(empty_road_config):
    seen = []

    result = run_closed_loop(empty_road_config, on_step=seen.append, duration=0.8)

    assert len(result.steps) == 2
    assert [s.step for s in seen] == [0, 1]
    assert seen[0] is result.steps[0]
    assert [s.mode for s in result.steps] == ['lane-keep', 'lane-keep']
    assert not any(s.emergency or s.relaxed for s in result.steps)
    assert result.steps[0].horizon == 24
    summary = result.summary
    assert summary['steps'] == 2
    assert summary['final_time'] == pytest.approx(0.8)
    assert summary['final_lane'] == 2
    assert summary['collision'] is False
    assert summary['min_gap'] is None
    assert summary['final_state'][1] == pytest.approx(30.0, abs=0.5)
    assert summary['final_state'][3] == pytest.approx(26.88, abs=1e-3)


def test_case_run_records_scenarios_and_predictions(case1_config):
    result = run_closed_loop(case1_config, duration=0.8)

    first = result.steps[0].to_record()
    assert first['step'] == 0
    assert first['ego'] == pytest.approx(list(CASE1_EGO))
    assert set(first['costs']) == {'lane-keep', 'lane-change-1'}
    assert [p['id'] for p in first['predictions']] == [1, 2]
    probabilities = [s['probability'] for s in first['scenarios']]
    assert sum(probabilities) == pytest.approx(1.0, abs=1e-4)
    assert all(p >= case1_config.scenarios.p_threshold for p in probabilities)


def test_runs_are_reproducible(case1_config):
    noisy = with_overrides(case1_config, simulation={'add_measurement_noise': True, 'seed': 3})

    first = run_closed_loop(noisy, duration=0.8)
    second = run_closed_loop(noisy, duration=0.8)

    assert step_records(first.steps) == step_records(second.steps)
    strip = {k: v for k, v in first.summary.items() if k != 'timing'}
    assert strip == {k: v for k, v in second.summary.items() if k != 'timing'}


def test_collision_at_start_is_reported(case1_document):
    document = json.loads(json.dumps(case1_document))
    document['scene']['targets'][0]['state'] = [4.0, 30.0, 0.0, 25.65, 0.0, 0.0]
    cfg = load_config(document)

    with pytest.raises(CollisionError) as info:
        run_closed_loop(cfg, duration=0.8)

    forensics = info.value.forensics
    assert forensics['tick'] == 0
    assert forensics['target']['id'] == 1
    assert forensics['last_step'] is None


def test_outputs_as_jsonl(empty_road_config, tmp_path):
    result = run_closed_loop(empty_road_config, duration=0.8)

    paths = write_outputs(result.steps, result.summary, tmp_path / 'run')

    lines = paths['steps'].read_text().splitlines()
    assert len(lines) == 2
    assert json.loads(lines[1])['step'] == 1
    summary = json.loads(paths['summary'].read_text())
    assert summary['name'] == 'empty-road'
    assert 'collision' not in paths


def test_outputs_as_csv_with_collision(empty_road_config, tmp_path):
    result = run_closed_loop(empty_road_config, duration=0.8)

    paths = write_outputs(result.steps, result.summary, tmp_path, fmt='csv',
                          collision={'tick': 3})

    frame = pd.read_csv(paths['steps'])
    assert list(frame['step']) == [0, 1]
    assert 'cost_lane_keep' in frame.columns
    assert set(frame['mode']) == {'lane-keep'}
    assert json.loads(paths['collision'].read_text()) == {'tick': 3}


def test_write_jsonl_creates_parent(tmp_path):
    path = write_jsonl([{'b': 1, 'a': 2}], tmp_path / 'nested' / 'out.jsonl')

    assert path.read_text() == '{"a":2,"b":1}\n'


def test_prediction_run_over_scene(case1_config):
    records = run_predict(case1_config, duration=0.8)

    assert [r['step'] for r in records] == [0, 1]
    assert [p['id'] for p in records[0]['predictions']] == [1, 2]
    assert records[1]['ego'][0] == pytest.approx(CASE1_EGO[0] + CASE1_EGO[1] * 0.4)


def test_prediction_run_over_dataset(case1_tracks):
    cfg = load_config({'simulation': {'dataset': str(case1_tracks), 'ego_id': 0,
                                      'start_frame': 100, 'Ts': 0.8}})

    records = run_predict(cfg)

    assert len(records) == 2
    assert records[0]['ego'] == pytest.approx(list(CASE1_EGO))
    assert [p['id'] for p in records[1]['predictions']] == [1, 2]
    assert records[1]['ego'][0] == pytest.approx(CASE1_EGO[0] + CASE1_EGO[1] * 0.4)


def test_braking_vehicle_stops(empty_road_config, gains, lanes):
    spec = VehicleSpec(id=1, state=[50.0, 0.06, 0.0, 26.88, 0.0, 0.0], length=4.5, width=1.9,
                       behavior='brake', brake_time=0.0)
    traffic = ScriptedTraffic([spec], empty_road_config, gains, lanes)

    traffic.advance(None)
    traffic.advance(None)

    state = traffic.vehicles()[0].state
    assert state.v_lon == 0.0
    assert state.p_lon == pytest.approx(50.0 + 0.06 ** 2 / 6.0)


def test_constant_velocity_vehicle_holds_lane(empty_road_config, gains, lanes):
    spec = VehicleSpec(id=1, state=[0.0, 20.0, 0.5, 25.5, 0.3, 0.1], length=4.5, width=1.9)
    traffic = ScriptedTraffic([spec], empty_road_config, gains, lanes)

    for _ in range(25):
        traffic.advance(None)

    state = traffic.vehicles()[0].state
    assert state.p_lon == pytest.approx(20.0)
    assert state.p_lat == 25.5


def test_policy_vehicle_converges_to_target_lane(empty_road_config, gains, lanes):
    spec = VehicleSpec(id=1, state=[0.0, 25.0, 0.0, 26.88, 0.0, 0.0], length=4.5, width=1.9,
                       behavior='policy', mode='VT-3', r_ref=28.0)
    traffic = ScriptedTraffic([spec], empty_road_config, gains, lanes)

    for _ in range(500):
        traffic.advance(None)

    state = traffic.vehicles()[0].state
    assert state.p_lat == pytest.approx(31.3, abs=0.05)
    assert state.v_lon == pytest.approx(28.0, abs=0.5)


def test_shifted_plan_is_resampled():
    plan = np.zeros((4, 6))
    plan[:, 0] = [0.0, 10.0, 20.0, 30.0]

    shifted = _shifted_plan(plan, 0.0, 0.2, 5, 0.4)

    np.testing.assert_allclose(shifted[:, 0], [5.0, 15.0, 25.0])
    assert _shifted_plan(None, 0.0, 0.2, 5, 0.4) is None
    assert _shifted_plan(plan, 0.0, 2.0, 5, 0.4) is None


@pytest.mark.parametrize('seed', range(5))
def test_random_scenes_are_valid(empty_road_config, seed):
    cfg = random_scene(np.random.default_rng(seed), empty_road_config)

    validate_config(cfg)
    ego, lead = cfg.scene.ego, cfg.scene.targets[0]
    assert lead.behavior == 'brake'
    assert lead.state[3] == ego.state[3]
    assert lead.state[0] > (ego.length + lead.length) / 2.0
    assert empty_road_config.scene.targets == []


def test_bench_reports_latency(empty_road_config):
    report = bench(empty_road_config, scenes=2, seed=1, duration=0.4)

    assert report['scenes'] == 2
    assert report['steps'] == 2 - report['collisions'] - report['feasibility_violations']
    assert set(report['step']) == {'p50_ms', 'p95_ms', 'max_ms'}
    assert report['collisions'] + report['feasibility_violations'] <= 2


def test_three_undecided_targets_on_the_first_tick():
    document = {
        'name': 'three-targets', 'schema_version': 1,
        'simulation': {'Ts': 0.8, 'seed': 0},
        'scene': {
            'ego': {'id': 0, 'state': [0.0, 30.0, 0.0, 26.88, 0.0, 0.0],
                    'length': 4.5, 'width': 1.9},
            'targets': [
                {'id': vid, 'state': [p, 30.0, 0.0, y, 0.0, 0.0], 'length': 4.5,
                 'width': 1.9, 'behavior': 'constant-velocity'}
                for vid, p, y in ((1, 80.0, 26.88), (2, 60.0, 22.98), (3, 70.0, 31.3))
            ],
        },
    }
    cfg = load_config(document)

    result = run_closed_loop(cfg, duration=0.8)

    assert len(result.steps) == 2
    first = result.steps[0]
    assert len(first.scenarios) >= 1
    assert sum(s.probability for s in first.scenarios) == pytest.approx(1.0, abs=1e-9)
    assert not result.summary['collision']


def test_gains_follow_config(case1_config):
    gains = build_gains(case1_config)

    np.testing.assert_allclose(gains.k_lat, [1.15, 3.39, 3.58])
    assert gains.k_lon_vt[0] == 0.0


@pytest.mark.slow
def test_case1_changes_to_the_left_lane(case1_config):
    result = run_closed_loop(case1_config)
    summary = result.summary

    assert not summary['collision']
    assert summary['relaxed_steps'] == 0
    assert summary['lane_changes'][0]['to'] == 1
    started = next(s.time for s in result.steps if s.mode == 'lane-change-1')
    crossed = next(s.time for s in result.steps if s.lane == 1)
    assert crossed - started <= 3.0
    settled = next(s.time for s in result.steps if abs(s.ego.p_lat - 22.98) <= 0.2)
    assert settled - started <= 3.0 + case1_config.controller.Tp
    assert summary['final_lane'] == 1
    assert summary['final_state'][3] == pytest.approx(22.98, abs=0.2)
    assert summary['min_gap_slack'] is None or summary['min_gap_slack'] >= 0.0


@pytest.mark.slow
def test_case2_follows_the_truck(case2_config):
    result = run_closed_loop(case2_config)
    summary = result.summary
    c = case2_config.controller

    assert not summary['collision']
    assert summary['relaxed_steps'] == 0
    assert summary['final_lane'] == 2
    assert summary['final_state'][1] == pytest.approx(23.21, abs=1.0)
    dd = (4.14 + 9.2) / 2.0 + c.safety_margin
    for step in result.steps:
        assert step.gap is not None
        # time-gap row of the nominal plan; the plan sees the predicted truck
        assert step.gap - dd - c.tau * step.ego.v_lon >= -0.25


@pytest.mark.slow
def test_braking_leads_never_cause_collisions(empty_road_config):
    scenes, duration = (200, 6.0) if FULL else (3, 2.0)
    cfg = with_overrides(empty_road_config, controller={'N': 15})

    for index in range(scenes):
        scene_cfg = random_scene(np.random.default_rng([0, index]), cfg)
        summary = run_closed_loop(scene_cfg, duration=duration, verify_feasibility=True).summary

        assert not summary['collision']
        assert summary['shift_violations'] == 0
        assert summary['relaxed_steps'] == 0
        assert summary['min_gap_slack'] is None or summary['min_gap_slack'] >= -1e-6
