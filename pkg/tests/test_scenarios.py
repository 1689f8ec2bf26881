from types import SimpleNamespace

import numpy as np
import pytest

from conftest import make_vehicle
from highway_scmpc.core_types import LANE_KEEP, ControlMode, PolicyMode, SceneSnapshot
from highway_scmpc.errors import ScenarioError
from highway_scmpc.scenarios import (
    Scenario, braking_trajectory, build_worst_case, enumerate_assignments, enumerate_scenarios,
    filter_renormalize, relevant_lanes, select_scenarios,
)

UNIFORM = np.full(6, 1.0 / 6.0)


def test_no_vehicles_give_one_empty_scenario():
    assert enumerate_assignments({}) == [((), 1.0)]


def test_uniform_pair_enumerates_all_combinations():
    assignments = enumerate_assignments({1: UNIFORM, 2: UNIFORM})

    assert len(assignments) == 36
    assert sum(p for _, p in assignments) == pytest.approx(1.0)
    assert all(p == pytest.approx(1.0 / 36.0) for _, p in assignments)
    assert [vid for vid, _ in assignments[0][0]] == [1, 2]


def test_zero_probability_modes_are_skipped():
    assignments = enumerate_assignments({
        1: [0.9, 0.1, 0.0, 0.0, 0.0, 0.0],
        2: [0.0, 0.5, 0.0, 0.0, 0.5, 0.0],
    })

    probabilities = sorted(p for _, p in assignments)
    assert probabilities == pytest.approx([0.05, 0.05, 0.45, 0.45])
    assert (
        ((1, PolicyMode('VT', 1)), (2, PolicyMode('DK', 2))), pytest.approx(0.45)
    ) in assignments


def test_product_over_cap_prunes_unlikely_modes():
    peaked = [0.9, 0.02, 0.02, 0.02, 0.02, 0.02]

    assignments = enumerate_assignments({1: peaked, 2: peaked}, max_scenarios=10)

    assert len(assignments) == 1
    assert assignments[0][1] == pytest.approx(1.0)


def test_unprunable_product_is_rejected():
    with pytest.raises(ScenarioError):
        enumerate_assignments({1: UNIFORM}, max_scenarios=2)


def test_filter_renormalizes_survivors():
    scenarios = [Scenario((), p) for p in (0.6, 0.3, 0.1)]

    survivors = filter_renormalize(scenarios, 0.2)

    assert [s.probability for s in survivors] == pytest.approx([2.0 / 3.0, 1.0 / 3.0])


def test_filter_keeps_everything_above_threshold():
    scenarios = [Scenario((), p) for p in (0.5, 0.5)]

    assert filter_renormalize(scenarios, 0.05) == scenarios


def test_filter_without_survivors():
    with pytest.raises(ScenarioError):
        filter_renormalize([Scenario((), 0.01), Scenario((), 0.02)], 0.05)


def test_scenarios_carry_mode_trajectories():
    mode_trajectories = np.zeros((6, 16, 7))
    for m in range(6):
        mode_trajectories[m, :, 0] = m
    fan = SimpleNamespace(mu=np.array([0.7, 0.0, 0.0, 0.3, 0.0, 0.0]),
                          trajectory=np.full((16, 7), -1.0),
                          mode_trajectories=mode_trajectories)

    scenarios = enumerate_scenarios({4: fan})

    assert len(scenarios) == 2
    by_label = {s.label: s for s in scenarios}
    assert set(by_label) == {'4:VT-1', '4:DK-1'}
    np.testing.assert_array_equal(by_label['4:DK-1'].trajectories[4][:, 0], 3.0)
    assert by_label['4:DK-1'].trajectories[4].shape == (16, 6)
    assert by_label['4:VT-1'].modes == {4: PolicyMode('VT', 1)}


def test_fan_without_mode_paths_uses_fused_trajectory():
    fan = SimpleNamespace(mu=np.array([1.0, 0, 0, 0, 0, 0]), trajectory=np.ones((16, 7)),
                          mode_trajectories=None)

    scenario = enumerate_scenarios({4: fan})[0]

    np.testing.assert_array_equal(scenario.trajectories[4], np.ones((16, 6)))


def test_scenario_record():
    scenario = Scenario(((1, PolicyMode('VT', 2)), (3, PolicyMode('DK', 1))), 0.1234567)

    assert scenario.to_record() == {'assignment': {'1': 'VT-2', '3': 'DK-1'},
                                    'probability': 0.123457}
    assert Scenario((), 1.0).label == 'empty'


def test_braking_reaches_standstill():
    path = braking_trajectory((141.19, 23.04, 0.05, 25.42), -3.0, 24, 0.4)

    assert path.shape == (25, 6)
    assert path[19, 1] > 0.0
    assert path[20, 1] == 0.0
    assert path[-1, 0] == pytest.approx(141.19 + 88.4736, abs=1e-3)
    assert np.all(np.diff(path[:, 0]) >= 0.0)
    np.testing.assert_array_equal(path[:, 3], 25.42)


def test_braking_from_rest_stays_put():
    path = braking_trajectory((10.0, 0.0, 0.0, 26.88), -3.0, 5, 0.4)

    np.testing.assert_array_equal(path[:, 0], 10.0)
    np.testing.assert_array_equal(path[:, 1], 0.0)


def centered_scene(lanes, targets=()):
    return SceneSnapshot(time=0.0, ego=make_vehicle(0, (0.0, 30.0, 0.0, 26.88, 0.0, 0.0)),
                         targets=tuple(targets), lanes=lanes)


def test_relevant_lanes(lanes):
    scene = centered_scene(lanes)

    assert relevant_lanes(scene, LANE_KEEP) == (2,)
    assert relevant_lanes(scene, ControlMode(1)) == (1, 2)


def test_straddling_ego_watches_both_lanes(case1_scene):
    assert relevant_lanes(case1_scene, LANE_KEEP) == (1, 2)


def test_worst_case_uses_nearest_leads(case1_scene):
    worst = build_worst_case(case1_scene, ControlMode(1), -3.0, 15, 0.4)

    assert set(worst.leads) == {1, 2}
    assert worst.lead_in(1).vehicle_id == 1
    assert worst.lead_in(2).vehicle_id == 2
    assert worst.lead_in(2).length == 14.35
    assert not worst.lead_in(2).virtual
    assert worst.lead_in(3) is None
    assert worst.a_min == -3.0


def test_empty_lane_gets_virtual_lead(lanes):
    scene = centered_scene(lanes)

    worst = build_worst_case(scene, LANE_KEEP, -3.0, 15, 0.4, virtual_distance=500.0)

    lead = worst.lead_in(2)
    assert lead.virtual
    assert lead.vehicle_id is None
    assert lead.length == 4.85
    assert lead.trajectory[0, 0] == 500.0
    assert lead.trajectory[0, 1] == 30.0


def test_extra_lanes_are_covered(lanes):
    scene = centered_scene(lanes, [make_vehicle(5, (80.0, 25.0, 0.0, 31.3, 0.0, 0.0))])

    worst = build_worst_case(scene, LANE_KEEP, -3.0, 15, 0.4, extra_lanes=(3,))

    assert set(worst.leads) == {2, 3}
    assert worst.lead_in(3).vehicle_id == 5


def test_vehicle_behind_never_becomes_a_braking_lead(lanes):
    follower = make_vehicle(6, (-20.0, 32.0, 0.0, 22.98, 0.0, 0.0))
    scene = centered_scene(lanes, [follower])

    worst = build_worst_case(scene, ControlMode(1), -3.0, 15, 0.4, virtual_distance=500.0)

    assert worst.lead_in(1).virtual
    assert worst.lead_in(1).vehicle_id is None
    assert all(lead.vehicle_id != 6 for lead in worst.leads.values())


def test_pruning_tries_the_filter_threshold_first():
    peaked = [0.5, 0.3, 0.1, 0.04, 0.03, 0.03]

    assignments = enumerate_assignments({vid: peaked for vid in range(1, 6)})

    # 6^5 exceeds the cap; dropping modes under 0.05 leaves 3^5
    assert len(assignments) == 243
    assert sum(p for _, p in assignments) == pytest.approx(1.0, abs=1e-9)


def test_pruning_raises_the_threshold_when_needed():
    spread = [0.3, 0.25, 0.2, 0.15, 0.06, 0.04]

    assignments = enumerate_assignments({vid: spread for vid in range(1, 6)}, max_scenarios=400)

    # 5^5 survives the first pass; the per-vehicle threshold 0.05 ** 0.2 keeps the top mode
    assert len(assignments) == 1
    assert assignments[0][1] == pytest.approx(1.0)


def test_dominant_lane_pair_keeps_its_shape():
    assignments = enumerate_assignments({
        1: [0.0, 0.913, 0.087, 0.0, 0.0, 0.0],
        2: [0.0, 1.0, 0.0, 0.0, 0.0, 0.0],
    })

    assert sorted(p for _, p in assignments) == pytest.approx([0.087, 0.913], abs=1e-12)
    survivors = filter_renormalize([Scenario(a, p) for a, p in assignments], 0.05)
    assert sorted(s.probability for s in survivors) == pytest.approx([0.087, 0.913])


@pytest.mark.parametrize('seed', range(20))
def test_random_tables_renormalize_with_ratios_intact(seed):
    rng = np.random.default_rng(seed)
    tables = {vid: rng.dirichlet(np.full(6, 0.5)) for vid in range(1, rng.integers(1, 4) + 1)}

    scenarios = [Scenario(a, p) for a, p in enumerate_assignments(tables)]
    assert sum(s.probability for s in scenarios) == pytest.approx(1.0, abs=1e-9)

    threshold = min(0.05, max(s.probability for s in scenarios))
    survivors = filter_renormalize(scenarios, threshold)
    assert sum(s.probability for s in survivors) == pytest.approx(1.0, abs=1e-9)
    before = {s.assignment: s.probability for s in scenarios}
    base = survivors[0]
    for s in survivors:
        assert s.probability >= threshold - 1e-12
        ratio = before[s.assignment] / before[base.assignment]
        assert s.probability / base.probability == pytest.approx(ratio, rel=1e-12)


def test_selection_without_survivors_keeps_the_likeliest():
    scenarios = [Scenario(a, p) for a, p in
                 enumerate_assignments({1: UNIFORM, 2: UNIFORM, 3: UNIFORM})]

    selected = select_scenarios(scenarios, 0.05)

    # 1/216 each; eleven of them first reach the 0.05 mass
    assert len(selected) == 11
    assert sum(s.probability for s in selected) == pytest.approx(1.0, abs=1e-9)
    assert all(s.probability == pytest.approx(1.0 / 11.0) for s in selected)


def test_selection_with_survivors_is_the_plain_filter():
    scenarios = [Scenario((), p) for p in (0.6, 0.3, 0.1)]

    assert select_scenarios(scenarios, 0.2) == filter_renormalize(scenarios, 0.2)


def test_selection_needs_scenarios():
    with pytest.raises(ScenarioError):
        select_scenarios([], 0.05)
