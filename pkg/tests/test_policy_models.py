import numpy as np
import pytest

from conftest import K_LAT
from highway_scmpc.core_types import CommonState, PolicyMode
from highway_scmpc.errors import LaneError, ModelError, SynthesisError
from highway_scmpc.policy_models import (
    GainSet, GainWeights, build_mode_dynamics, synthesize_gains, virtual_leader,
)

T = 0.04


def triple_integrator(T):
    A = np.array([[1.0, T, T ** 2 / 2.0], [0.0, 1.0, T], [0.0, 0.0, 1.0]])
    B = np.array([[T ** 3 / 6.0], [T ** 2 / 2.0], [T]])
    return A, B


def riccati_iteration(A, B, Q, R, max_iter=500000):
    P = Q.copy()
    for _ in range(max_iter):
        BtPA = B.T @ P @ A
        P_next = Q + A.T @ P @ A - BtPA.T @ np.linalg.solve(R + B.T @ P @ B, BtPA)
        if np.max(np.abs(P_next - P)) <= 1e-13 * np.max(np.abs(P_next)):
            P = P_next
            break
        P = P_next
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A).ravel()


def test_configured_lateral_gain_is_stabilizing(gains):
    radii = gains.spectral_radii(T)

    assert radii['k_lat'] < 1.0
    assert radii['k_lon_vt'] < 1.0
    assert radii['k_lon_dk'] < 1.0


def test_distance_keeping_gain_matches_riccati_iteration():
    gains = synthesize_gains(GainWeights(lon_input=1.0), T, k_lat=K_LAT)
    A, B = triple_integrator(T)

    expected = riccati_iteration(A, B, np.eye(3), np.eye(1))

    np.testing.assert_allclose(gains.k_lon_dk, expected, rtol=1e-7, atol=1e-8)


def test_velocity_gain_ignores_position(gains):
    assert gains.k_lon_vt[0] == 0.0
    assert np.all(gains.k_lon_vt[1:] > 0.0)


def test_expensive_input_gives_gentler_gain(gains):
    gentle = synthesize_gains(GainWeights(lon_input=1000.0), T,
                              k_lon_dk=gains.k_lon_dk, k_lat=K_LAT)

    assert np.linalg.norm(gentle.k_lon_vt) < np.linalg.norm(gains.k_lon_vt)
    radius = gentle.spectral_radii(T)['k_lon_vt']
    assert gains.spectral_radii(T)['k_lon_vt'] < radius < 1.0


def test_explicit_gains_bypass_synthesis():
    explicit = synthesize_gains(GainWeights(), T, k_lon_vt=(0.0, 0.3, 0.9),
                                k_lon_dk=(0.1, 0.5, 1.0), k_lat=K_LAT)

    np.testing.assert_array_equal(explicit.k_lon_vt, [0.0, 0.3, 0.9])
    np.testing.assert_array_equal(explicit.k_lon_dk, [0.1, 0.5, 1.0])


@pytest.mark.parametrize('kwargs', [
    {'weights': GainWeights(), 'k_lat': (0.0, 0.0, 0.0)},
    {'weights': GainWeights(lon_state=(-1.0, 1.0, 1.0))},
    {'weights': GainWeights(lat_input=0.0)},
])
def test_invalid_synthesis_inputs(kwargs):
    weights = kwargs.pop('weights')
    with pytest.raises(SynthesisError):
        synthesize_gains(weights, T, **kwargs)


def test_sampling_time_must_be_positive():
    with pytest.raises(SynthesisError):
        synthesize_gains(GainWeights(), 0.0)


def test_validate_reports_failing_channel():
    unstable = GainSet(np.zeros(3), np.array([0.1, 0.5, 1.0]), np.array(K_LAT))
    with pytest.raises(SynthesisError) as info:
        unstable.validate(T)
    assert 'k_lon_vt' in str(info.value.detail)


def test_velocity_tracking_block(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, T, lanes)
    k2, k3 = gains.k_lon_vt[1:]

    assert dyn.F[1, 1] == pytest.approx(1.0 - k2 * T ** 2 / 2.0)
    assert dyn.F[1, 3] == pytest.approx(k2 * T ** 2 / 2.0)
    assert dyn.F[2, 2] == pytest.approx(1.0 - k3 * T)
    np.testing.assert_array_equal(dyn.F[3], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0])
    np.testing.assert_array_equal(dyn.F[:4, 4:], 0.0)
    np.testing.assert_array_equal(dyn.F[4:, :4], 0.0)
    assert not dyn.depends_on_lv


def test_zero_gains_reduce_to_integrator(lanes):
    zeros = np.zeros(3)
    dyn = build_mode_dynamics(PolicyMode('VT', 1), GainSet(zeros, zeros, zeros), T, lanes)
    A, _ = triple_integrator(T)

    np.testing.assert_allclose(dyn.F[:3, :3], A)
    np.testing.assert_allclose(dyn.F[4:, 4:], A)
    np.testing.assert_array_equal(dyn.E, 0.0)


def test_distance_keeping_offset_follows_lead(gains, lanes):
    lead = CommonState(100.0, 20.0, 0.0, 26.88, 0.0, 0.0)
    dyn = build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes, lv_state=lead)
    k1, k2, k3 = gains.k_lon_dk

    expected = [
        (k1 * T ** 3 / 6.0 - 1.0) * 100.0 + (k2 * T ** 3 / 6.0 - T) * 20.0,
        k1 * T ** 2 / 2.0 * 100.0 + (k2 * T ** 2 / 2.0 - 1.0) * 20.0,
        k1 * T * 100.0 + k2 * T * 20.0,
        0.0,
    ]
    np.testing.assert_allclose(dyn.E[:4], expected, rtol=1e-12, atol=1e-9)
    np.testing.assert_allclose(dyn.frame_offset[:3], [100.0 + 20.0 * T, 20.0, 0.0])
    assert dyn.depends_on_lv


def test_distance_keeping_needs_lead(gains, lanes):
    with pytest.raises(ModelError):
        build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes)


def test_target_lane_outside_road():
    with pytest.raises(LaneError):
        PolicyMode('VT', 4)


def test_tracking_fixed_point_is_stationary(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, T, lanes)
    z = np.array([10.0, 25.0, 0.0, 25.0, lanes.centerline(2), 0.0, 0.0])

    step = dyn.step(z) - z

    np.testing.assert_allclose(step, [25.0 * T, 0, 0, 0, 0, 0, 0], atol=1e-9)


def test_velocity_error_decays(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, T, lanes)
    z = np.array([0.0, 20.0, 0.0, 30.0, lanes.centerline(2), 0.0, 0.0])

    for _ in range(500):
        z = dyn.step(z)

    assert abs(z[1] - 30.0) < 0.05 * 10.0


def test_lateral_position_converges_to_target(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 1), gains, T, lanes)
    z = np.array([0.0, 25.0, 0.0, 25.0, lanes.centerline(2), 0.0, 0.0])

    for _ in range(1000):
        z = dyn.step(z)

    assert abs(z[4] - lanes.centerline(1)) < 1e-6


def test_composed_step_matches_repeated_steps(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 3), gains, T, lanes)
    z0 = np.array([0.0, 24.0, 0.5, 28.0, 25.0, 0.2, 0.0])

    z = z0
    for _ in range(10):
        z = dyn.step(z)

    np.testing.assert_allclose(dyn.compose(10).step(z0), z, atol=1e-9)


def test_composed_distance_keeping_advances_lead(gains, lanes):
    lead = CommonState(100.0, 20.0, 0.0, 26.88, 0.0, 0.0)
    dyn = build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes, lv_state=lead)
    z0 = np.array([60.0, 22.0, 0.0, 2.0, 26.88, 0.0, 0.0])

    z = z0
    for k in range(10):
        moved = CommonState(100.0 + 20.0 * T * k, 20.0, 0.0, 26.88, 0.0, 0.0)
        z = build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes, lv_state=moved).step(z)

    np.testing.assert_allclose(dyn.compose(10).step(z0), z, atol=1e-8)


def test_compose_rejects_zero_stride(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, T, lanes)
    with pytest.raises(ModelError):
        dyn.compose(0)


def test_virtual_leader_runs_at_follower_speed():
    state = CommonState(10.0, 27.0, 1.0, 26.0, 0.5, 0.0)

    leader = virtual_leader(state, 500.0)

    assert leader.p_lon == 510.0
    assert leader.v_lon == 27.0
    assert leader.a_lon == 0.0


def follow(gains, lanes, variant, seconds=10.0):
    """Gap after a DK-2 follower starts exactly r * v behind a 20 m/s leader."""
    z = np.array([80.0, 20.0, 0.0, 1.0, lanes.centerline(2), 0.0, 0.0])
    for k in range(int(round(seconds / T))):
        lead = CommonState(100.0 + 20.0 * T * k, 20.0, 0.0, lanes.centerline(2), 0.0, 0.0)
        z = build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes, lv_state=lead,
                                dk_matrix=variant).step(z)
    return 100.0 + 20.0 * T * round(seconds / T) - z[0], z


def test_distance_keeping_fixed_point_is_stationary(gains, lanes):
    gap, z = follow(gains, lanes, 'symmetric-k1')

    assert gap == pytest.approx(20.0, abs=1e-6)
    assert z[1] == pytest.approx(20.0, abs=1e-6)
    assert z[2] == pytest.approx(0.0, abs=1e-6)


def test_printed_r_coupling_drifts_off_the_gap(gains, lanes):
    gap, _ = follow(gains, lanes, 'as-printed')

    assert abs(gap - 20.0) > 1.0


def test_variants_differ_only_in_acceleration_row(gains, lanes):
    lead = CommonState(100.0, 20.0, 0.0, 26.88, 0.0, 0.0)
    printed = build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes, lv_state=lead)
    fixed = build_mode_dynamics(PolicyMode('DK', 2), gains, T, lanes, lv_state=lead,
                                dk_matrix='symmetric-k1')
    k1, k2, _ = gains.k_lon_dk

    diff = fixed.F - printed.F
    assert diff[2, 3] == pytest.approx((k2 - k1) * 20.0 * T)
    diff[2, 3] = 0.0
    np.testing.assert_array_equal(diff, 0.0)
