import os

import numpy as np
import pytest

from highway_scmpc.core_types import ALL_MODES, R_REF, CommonState, Longitudinal, PolicyMode
from highway_scmpc.errors import ConfigError, FilterError, ModelError
from highway_scmpc.imm import (
    ModeBelief, fuse, imm_mix, log_likelihood, mode_predict_update, noise_diagonal,
    predict_horizon, pseudo_r_measurement, standstill_clamp, state_transition,
    transition_matrix, update_probabilities, validate_transition_matrix,
)
from highway_scmpc.policy_models import GainSet, ModeDynamics, build_mode_dynamics

T = 0.04
FULL = os.environ.get('SCMPC_FULL_ACCEPTANCE') == '1'


def scalar_beliefs(means, variances, mu):
    return [ModeBelief(z=[m], P=[[v]], mu=p) for m, v, p in zip(means, variances, mu)]


def identity_dynamics():
    return ModeDynamics(F=np.eye(7), E=np.zeros(7), mode=ALL_MODES[0])


def test_default_transition_matrix():
    pi = transition_matrix(0.925)

    np.testing.assert_allclose(pi.sum(axis=1), 1.0, atol=1e-12)
    vt1, vt2, vt3, dk1 = (ALL_MODES.index(PolicyMode(lon, lane))
                          for lon, lane in (('VT', 1), ('VT', 2), ('VT', 3), ('DK', 1)))
    # no direct switch between lanes 1 and 3; that share stays on the diagonal
    assert pi[vt1, vt3] == 0.0
    assert pi[vt1, vt2] == pytest.approx(0.015)
    assert pi[vt1, dk1] == pytest.approx(0.015)
    assert pi[vt1, vt1] == pytest.approx(1.0 - 3 * 0.015)
    assert pi[vt2, vt2] == pytest.approx(0.925)


def test_transition_matrix_validation():
    with pytest.raises(ConfigError):
        validate_transition_matrix([[0.5, 0.4], [0.5, 0.5]])
    with pytest.raises(ConfigError):
        validate_transition_matrix([[1.2, -0.2], [0.5, 0.5]])
    with pytest.raises(ConfigError):
        validate_transition_matrix([[1.0, 0.0, 0.0]])


def test_mix_identical_beliefs_is_identity():
    z = np.arange(7, dtype=float)
    P = np.diag(np.linspace(1.0, 2.0, 7))
    beliefs = [ModeBelief(z=z, P=P, mu=1.0 / 6) for _ in range(6)]

    mixed, c = imm_mix(beliefs, transition_matrix(0.8))

    for belief in mixed:
        np.testing.assert_allclose(belief.z, z, atol=1e-12)
        np.testing.assert_allclose(belief.P, P, atol=1e-12)
    assert c.sum() == pytest.approx(1.0)


def test_mix_without_switching_keeps_beliefs():
    beliefs = scalar_beliefs([0.0, 1.0], [1.0, 2.0], [0.3, 0.7])

    mixed, c = imm_mix(beliefs, np.eye(2), common=None)

    np.testing.assert_allclose(c, [0.3, 0.7])
    assert mixed[0].z[0] == pytest.approx(0.0)
    assert mixed[1].P[0, 0] == pytest.approx(2.0)


def test_mix_two_mode_toy():
    beliefs = scalar_beliefs([0.0, 1.0], [1.0, 1.0], [0.5, 0.5])
    pi = np.array([[0.9, 0.1], [0.1, 0.9]])

    mixed, c = imm_mix(beliefs, pi, common=None)

    np.testing.assert_allclose(c, [0.5, 0.5])
    assert mixed[0].z[0] == pytest.approx(0.1)
    assert mixed[1].z[0] == pytest.approx(0.9)
    assert mixed[0].P[0, 0] == pytest.approx(1.09)
    assert mixed[1].P[0, 0] == pytest.approx(1.09)


def test_mix_keeps_own_reference_component():
    z_vt = np.array([0.0, 30.0, 0.0, 30.0, 26.88, 0.0, 0.0])
    z_dk = np.array([2.0, 28.0, 0.0, 1.5, 26.88, 0.0, 0.0])
    beliefs = [ModeBelief(z=z_vt, P=np.eye(7), mu=0.5), ModeBelief(z=z_dk, P=np.eye(7), mu=0.5)]

    mixed, _ = imm_mix(beliefs, np.array([[0.5, 0.5], [0.5, 0.5]]))

    assert mixed[0].z[3] == 30.0
    assert mixed[1].z[3] == 1.5
    assert mixed[0].z[0] == pytest.approx(1.0)


def test_mix_requires_normalized_probabilities():
    beliefs = scalar_beliefs([0.0, 1.0], [1.0, 1.0], [0.5, 0.4])
    with pytest.raises(FilterError):
        imm_mix(beliefs, np.eye(2), common=None)


def test_mix_reinitializes_unreachable_mode():
    beliefs = scalar_beliefs([0.0, 2.0], [1.0, 1.0], [0.5, 0.5])
    pi = np.array([[1.0, 0.0], [1.0, 0.0]])

    mixed, c = imm_mix(beliefs, pi, common=None, mu_floor=1e-6)

    assert c.sum() == pytest.approx(1.0)
    assert 0.0 < c[1] < 1e-5
    assert mixed[1].z[0] == pytest.approx(1.0)
    assert mixed[1].P[0, 0] == pytest.approx(2.0)


def test_mode_belief_validation():
    with pytest.raises(FilterError):
        ModeBelief(z=np.zeros(7), P=np.eye(6), mu=0.5)
    with pytest.raises(FilterError):
        ModeBelief(z=np.zeros(1), P=np.eye(1), mu=1.5)


def test_kalman_gain_is_half_with_unit_covariances():
    z = np.arange(7, dtype=float)
    residual = np.linspace(-1.0, 1.0, 7)
    belief = ModeBelief(z=z, P=np.eye(7), mu=1.0)

    posterior, r, S = mode_predict_update(belief, identity_dynamics(), z + residual,
                                          np.zeros((7, 7)), np.eye(7))

    np.testing.assert_allclose(r, residual)
    np.testing.assert_allclose(S, 2.0 * np.eye(7))
    np.testing.assert_allclose(posterior.z, z + 0.5 * residual)
    np.testing.assert_allclose(posterior.P, 0.5 * np.eye(7))


def test_update_with_exact_measurement_keeps_prediction(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, T, lanes)
    z = np.array([0.0, 28.0, 0.3, 30.0, 26.5, 0.1, 0.0])
    belief = ModeBelief(z=z, P=np.eye(7), mu=1.0)
    predicted = dyn.step(z)

    posterior, residual, _ = mode_predict_update(belief, dyn, predicted, np.zeros((7, 7)),
                                                 0.1 * np.eye(7))

    np.testing.assert_allclose(residual, 0.0, atol=1e-12)
    np.testing.assert_allclose(posterior.z, predicted, atol=1e-12)


def test_singular_residual_covariance_is_rejected():
    belief = ModeBelief(z=np.zeros(7), P=np.zeros((7, 7)), mu=1.0)
    with pytest.raises(FilterError):
        mode_predict_update(belief, identity_dynamics(), np.zeros(7), np.zeros((7, 7)),
                            np.zeros((7, 7)))


def test_filter_tracks_noiseless_truth(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 2), gains, T, lanes)
    truth = np.array([0.0, 25.0, 0.0, 30.0, 25.5, 0.0, 0.0])
    belief = ModeBelief(z=truth + np.array([2.0, -1.5, 0.5, 1.0, 0.4, 0.2, -0.1]),
                        P=np.eye(7), mu=1.0)
    Q = noise_diagonal([1e-4, 1e-3, 1e-2, 1e-3, 1e-4, 1e-3, 1e-2], 1e-4, False)
    R = noise_diagonal([0.01, 0.04, 0.25, 0.04, 0.01, 0.04, 0.25], 0.01, False)

    errors = [np.linalg.norm(belief.z - truth)]
    for _ in range(100):
        truth = dyn.step(truth)
        belief, _, _ = mode_predict_update(belief, dyn, truth, Q, R)
        errors.append(np.linalg.norm(belief.z - truth))

    assert errors[-1] < 1e-2 * errors[0]
    assert errors[10] < errors[0]


def test_covariances_stay_positive_semidefinite(gains, lanes):
    dyns = [build_mode_dynamics(PolicyMode('VT', lane), gains, T, lanes) for lane in (1, 2)]
    Q = noise_diagonal([1e-4, 1e-3, 1e-2, 1e-3, 1e-4, 1e-3, 1e-2], 1e-4, False)
    R = noise_diagonal([0.01, 0.04, 0.25, 0.04, 0.01, 0.04, 0.25], 0.01, False)
    rng = np.random.default_rng(3)
    truth = np.array([0.0, 30.0, 0.0, 30.0, 24.0, 0.0, 0.0])
    beliefs = [ModeBelief(z=truth, P=np.eye(7), mu=0.5) for _ in dyns]
    pi = np.array([[0.95, 0.05], [0.05, 0.95]])

    for _ in range(1000):
        truth = dyns[1].step(truth)
        y = truth + rng.normal(0.0, np.sqrt(np.diag(R)))
        mixed, c = imm_mix(beliefs, pi)
        outputs = [mode_predict_update(b, d, y, Q, R) for b, d in zip(mixed, dyns)]
        mu = update_probabilities([r for _, r, _ in outputs], [S for _, _, S in outputs], c)
        beliefs = [ModeBelief(z=post.z, P=post.P, mu=float(w))
                   for (post, _, _), w in zip(outputs, mu)]
        assert mu.sum() == pytest.approx(1.0, abs=1e-9)
        for belief in beliefs:
            assert np.linalg.eigvalsh(belief.P).min() >= -1e-10


def test_log_likelihood_of_zero_residual():
    assert log_likelihood(np.zeros(1), np.eye(1)) == pytest.approx(-0.5 * np.log(2 * np.pi))


def test_probabilities_from_scalar_residuals():
    mu = update_probabilities([np.array([0.0]), np.array([3.0])], [np.eye(1), np.eye(1)],
                              [0.5, 0.5])

    np.testing.assert_allclose(mu, [0.98901, 0.01099], atol=1e-5)


def test_identical_likelihoods_follow_normalizers():
    c = np.array([0.2, 0.3, 0.5])
    mu = update_probabilities([np.ones(2)] * 3, [np.eye(2)] * 3, c)

    np.testing.assert_allclose(mu, c, atol=1e-12)


def test_probabilities_fall_back_when_likelihoods_underflow():
    c = np.array([0.2, 0.4, 0.4])
    with np.errstate(over='ignore'):
        mu = update_probabilities([np.array([1e200])] * 3, [np.eye(1)] * 3, c)

    np.testing.assert_allclose(mu, [0.0, 0.5, 0.5])


def test_fuse_two_mode_mixture():
    beliefs = scalar_beliefs([0.0, 2.0], [1.0, 1.0], [0.5, 0.5])

    x, P = fuse(beliefs, [0.5, 0.5], common=None)

    assert x[0] == pytest.approx(1.0)
    assert P[0, 0] == pytest.approx(2.0)


def test_fuse_single_surviving_mode():
    beliefs = scalar_beliefs([0.0, 2.0], [1.0, 3.0], [0.0, 1.0])

    x, P = fuse(beliefs, [0.0, 1.0], common=None)

    assert x[0] == 2.0
    assert P[0, 0] == 3.0


def test_fused_covariance_dominates_mode_covariances():
    rng = np.random.default_rng(0)
    beliefs = []
    for _ in range(3):
        A = rng.normal(size=(7, 7))
        beliefs.append(ModeBelief(z=rng.normal(size=7), P=A @ A.T + np.eye(7), mu=1.0 / 3))
    mu = np.array([0.2, 0.3, 0.5])

    _, P = fuse(beliefs, mu)

    weighted = sum(w * b.P[np.ix_([0, 1, 2, 4, 5, 6], [0, 1, 2, 4, 5, 6])]
                   for w, b in zip(mu, beliefs))
    assert np.linalg.eigvalsh(P - weighted).min() >= -1e-10


def zero_gain_vt(lanes):
    zeros = np.zeros(3)
    return build_mode_dynamics(PolicyMode('VT', 2), GainSet(zeros, zeros, zeros), T, lanes)


def test_constant_velocity_prediction(lanes):
    z0 = np.array([0.0, 30.0, 0.0, 30.0, 26.88, 0.0, 0.0])

    trajectory = predict_horizon(z0, zero_gain_vt(lanes), n_steps=3)

    np.testing.assert_allclose(trajectory[1:, 0], [1.2, 2.4, 3.6], atol=1e-12)
    np.testing.assert_allclose(trajectory[:, 4], 26.88)


def test_zero_step_prediction_returns_estimate(lanes):
    z0 = np.arange(7, dtype=float)

    trajectory = predict_horizon(z0, [])

    np.testing.assert_array_equal(trajectory, z0[None, :])


def test_single_model_needs_horizon(lanes):
    with pytest.raises(ModelError):
        predict_horizon(np.zeros(7), zero_gain_vt(lanes))
    with pytest.raises(ModelError):
        predict_horizon(np.zeros(7), [zero_gain_vt(lanes)] * 2, n_steps=3)


def test_closed_form_matches_iteration(gains, lanes):
    dyn = build_mode_dynamics(PolicyMode('VT', 3), gains, T, lanes)
    z0 = np.array([5.0, 22.0, -0.4, 27.0, 25.0, 0.3, 0.1])
    N = 25

    Phi, offsets = state_transition([dyn] * N)
    trajectory = predict_horizon(z0, dyn, n_steps=N)

    F_power = np.linalg.matrix_power(dyn.F, N)
    offset = sum(np.linalg.matrix_power(dyn.F, k) @ dyn.offset for k in range(N))
    np.testing.assert_allclose(trajectory[-1], F_power @ z0 + offset, atol=1e-10)
    for t in range(N + 1):
        np.testing.assert_allclose(Phi[t] @ z0 + offsets[t], trajectory[t], atol=1e-10)


def test_reference_pseudo_measurements():
    assert pseudo_r_measurement('VT', 27.5, 10.0) == 27.5
    assert pseudo_r_measurement('DK', 25.0, 50.0, lead_p=100.0, lead_v=20.0) == \
        pytest.approx(2.5)
    assert pseudo_r_measurement('DK', 25.0, 120.0, lead_p=100.0, lead_v=20.0) == 0.0
    with pytest.raises(ModelError):
        pseudo_r_measurement('DK', 25.0, 50.0)


def test_noise_diagonal_switches_reference_entry():
    values = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]

    assert noise_diagonal(values, 0.5, is_dk=False)[3, 3] == 4.0
    assert noise_diagonal(values, 0.5, is_dk=True)[3, 3] == 0.5


def test_prediction_stops_at_standstill(lanes):
    z0 = np.array([0.0, 2.0, -2.0, 0.0, 26.88, 0.0, 0.0])

    trajectory = predict_horizon(z0, zero_gain_vt(lanes), n_steps=100)

    assert np.all(trajectory[:, 1] >= 0.0)
    assert np.all(np.diff(trajectory[:, 0]) >= 0.0)
    assert trajectory[-1, 1] == 0.0
    assert trajectory[-1, 0] == pytest.approx(1.0, abs=1e-6)


def test_unclamped_prediction_reverses(lanes):
    z0 = np.array([0.0, 2.0, -2.0, 0.0, 26.88, 0.0, 0.0])

    trajectory = predict_horizon(z0, zero_gain_vt(lanes), n_steps=100, standstill=False)

    assert trajectory[-1, 1] == pytest.approx(2.0 - 2.0 * 100 * T)
    assert trajectory[-1, 0] < 0.0


def test_standstill_clamp_leaves_moving_vehicle_alone():
    previous = np.array([10.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0])
    moving = np.array([10.04, 0.5, -1.0, 0.0, 0.0, 0.0, 0.0])

    assert standstill_clamp(previous, moving) is moving
    stopped = standstill_clamp(previous, np.array([9.9, -0.5, -1.0, 0.0, 0.0, 0.0, 0.0]))
    np.testing.assert_array_equal(stopped[:3], [10.0, 0.0, 0.0])


Q_VALUES = [1e-4, 1e-3, 1e-2, 1e-3, 1e-4, 1e-3, 1e-2]
R_VALUES = [0.01, 0.04, 0.25, 0.04, 0.01, 0.04, 0.25]
LEAD_GAP, LEAD_V = 40.0, 15.0


def lead_at(k, lanes):
    return CommonState(LEAD_GAP + LEAD_V * T * k, LEAD_V, 0.0, lanes.centerline(2), 0.0, 0.0)


def mode_model(mode, k, gains, lanes):
    lead = lead_at(k, lanes) if mode.longitudinal is Longitudinal.DK else None
    return build_mode_dynamics(mode, gains, T, lanes, lv_state=lead, dk_matrix='symmetric-k1')


def mode_noise(mode, values, scale, dk_r):
    return noise_diagonal(np.asarray(values) * scale, dk_r,
                          mode.longitudinal is Longitudinal.DK)


def simulate_truth(truth, gains, lanes, rng, cycles, Q):
    r0 = 25.0 if truth.longitudinal is Longitudinal.VT else LEAD_GAP / LEAD_V
    z = np.array([0.0, 25.0, 0.0, r0, lanes.centerline(2), 0.0, 0.0])
    path = [z]
    for k in range(cycles):
        z = mode_model(truth, k, gains, lanes).step(z) + rng.multivariate_normal(np.zeros(7), Q)
        path.append(z)
    return np.stack(path)


def mode_measurements(truth, z, k, rng, R, lanes):
    """One noisy measurement; modes of the other policy see their own r pseudo measurement."""
    y = z + rng.multivariate_normal(np.zeros(7), R)
    lead = lead_at(k, lanes)
    out = []
    for mode in ALL_MODES:
        y_mode = y.copy()
        if mode.longitudinal is not truth.longitudinal:
            y_mode[R_REF] = pseudo_r_measurement(mode.longitudinal.value, y[1], y[0],
                                                 lead_p=lead.p_lon, lead_v=lead.v_lon)
        out.append(y_mode)
    return out


def cycles_to_identify(truth, gains, lanes, seed, cycles=50, scale=1e-2):
    rng = np.random.default_rng(seed)
    Qs = [mode_noise(m, Q_VALUES, scale, 1e-6) for m in ALL_MODES]
    Rs = [mode_noise(m, R_VALUES, scale, 1e-4) for m in ALL_MODES]
    R_truth = Rs[truth.index]
    path = simulate_truth(truth, gains, lanes, rng, cycles, Qs[truth.index])
    pi = transition_matrix(0.925)
    beliefs = [ModeBelief(z=y, P=R, mu=1.0 / 6.0)
               for y, R in zip(mode_measurements(truth, path[0], 0, rng, R_truth, lanes), Rs)]

    for k in range(cycles):
        mixed, c = imm_mix(beliefs, pi)
        ys = mode_measurements(truth, path[k + 1], k + 1, rng, R_truth, lanes)
        outputs = [mode_predict_update(b, mode_model(m, k, gains, lanes), y, Q, R)
                   for b, m, y, Q, R in zip(mixed, ALL_MODES, ys, Qs, Rs)]
        mu = update_probabilities([r for _, r, _ in outputs], [S for _, _, S in outputs], c)
        if mu[truth.index] > 0.9:
            return k + 1
        beliefs = [ModeBelief(z=post.z, P=post.P, mu=float(w))
                   for (post, _, _), w in zip(outputs, mu)]
    return None


@pytest.mark.slow
@pytest.mark.parametrize('truth', [PolicyMode('VT', 2), PolicyMode('VT', 3), PolicyMode('DK', 2)],
                         ids=lambda m: m.label)
def test_true_mode_is_identified_within_fifty_cycles(gains, lanes, truth):
    seeds = 100 if FULL else 20

    identified = [cycles_to_identify(truth, gains, lanes, seed) for seed in range(seeds)]

    assert sum(n is not None for n in identified) >= 0.95 * seeds


@pytest.mark.slow
def test_matched_filter_innovations_are_consistent(gains, lanes):
    truth = PolicyMode('VT', 3)
    Q = mode_noise(truth, Q_VALUES, 1.0, 1e-4)
    R = mode_noise(truth, R_VALUES, 1.0, 1e-2)
    P0 = np.diag([1.0, 0.25, 0.1, 0.25, 0.1, 0.05, 0.05])
    values = []

    for seed in range(100 if FULL else 20):
        rng = np.random.default_rng(seed)
        path = simulate_truth(truth, gains, lanes, rng, 50, Q)
        belief = ModeBelief(z=rng.multivariate_normal(path[0], P0), P=P0, mu=1.0)
        for k in range(50):
            y = path[k + 1] + rng.multivariate_normal(np.zeros(7), R)
            belief, residual, S = mode_predict_update(
                belief, mode_model(truth, k, gains, lanes), y, Q, R)
            values.append(residual @ np.linalg.solve(S, residual))

    # chi-square with 7 degrees of freedom
    assert 5.5 <= np.mean(values) <= 8.5
