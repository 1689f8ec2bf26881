"""
Interacting multiple model Kalman filter primitives.

A vehicle's filter bank holds one ModeBelief per policy mode. One filter cycle is
imm_mix -> mode_predict_update (per mode) -> update_probabilities -> fuse. Mixing acts on
the six common kinematic states; each mode keeps its own r_ref, whose unit differs between
VT (m/s) and DK (s).

Usage:
    pi = transition_matrix(0.925)
    mixed, c = imm_mix(beliefs, pi)
    post, residual, S = mode_predict_update(mixed[i], dyn_i, y_i, Q_i, R_i)
    mu = update_probabilities(residuals, covariances, c)
    x, P = fuse(posteriors, mu)
"""

from dataclasses import dataclass, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from highway_scmpc.core_types import A_LON, ALL_MODES, COMMON_INDICES, P_LON, R_REF, V_LON
from highway_scmpc.errors import ConfigError, FilterError, ModelError
from highway_scmpc.policy_models import ModeDynamics
from highway_scmpc.structured_logger import get_logger

logger = get_logger(__name__)


@dataclass(frozen=True)
class ModeBelief:
    z: np.ndarray
    P: np.ndarray
    mu: float

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float).ravel()
        P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if P.shape != (z.size, z.size):
            raise FilterError(f'covariance shape {P.shape} does not match state size {z.size}')
        if not 0.0 <= self.mu <= 1.0 + 1e-12:
            raise FilterError(f'mode probability {self.mu} outside [0, 1]')
        object.__setattr__(self, 'z', z)
        object.__setattr__(self, 'P', 0.5 * (P + P.T))
        object.__setattr__(self, 'mu', float(min(max(self.mu, 0.0), 1.0)))


def transition_matrix(self_transition: float = 0.925, modes=ALL_MODES) -> np.ndarray:
    """
    Markov mode-transition matrix with pi[j][i] the probability of switching from j to i.

    Off-diagonal mass (1 - self_transition) is split evenly over the other modes; mass
    that would go to a non-adjacent target lane stays on the diagonal.
    """
    M = len(modes)
    share = (1.0 - self_transition) / (M - 1)
    pi = np.zeros((M, M))
    for j, src in enumerate(modes):
        for i, dst in enumerate(modes):
            if i != j and abs(src.target_lane - dst.target_lane) <= 1:
                pi[j, i] = share
        pi[j, j] = 1.0 - pi[j].sum()
    return validate_transition_matrix(pi)


def validate_transition_matrix(pi) -> np.ndarray:
    pi = np.asarray(pi, dtype=float)
    if pi.ndim != 2 or pi.shape[0] != pi.shape[1]:
        raise ConfigError(f'transition matrix must be square, got {pi.shape}',
                          key='filter.transition_matrix')
    if np.any(pi < 0.0) or np.any(pi > 1.0):
        raise ConfigError('transition probabilities must lie in [0, 1]',
                          key='filter.transition_matrix')
    if np.max(np.abs(pi.sum(axis=1) - 1.0)) > 1e-12:
        raise ConfigError('transition matrix rows must sum to 1',
                          key='filter.transition_matrix')
    return pi


def _indices(common, size):
    return np.arange(size) if common is None else np.asarray(common, dtype=int)


def fuse(beliefs: Sequence[ModeBelief], mu: Sequence[float],
         common: Optional[Sequence[int]] = COMMON_INDICES) -> Tuple[np.ndarray, np.ndarray]:
    """Moment-matched mean and covariance of the mixture over the `common` components."""
    mu = np.asarray(mu, dtype=float)
    idx = _indices(common, beliefs[0].z.size)
    means = np.stack([b.z[idx] for b in beliefs])
    x = mu @ means
    P = np.zeros((idx.size, idx.size))
    for weight, belief, mean in zip(mu, beliefs, means):
        d = mean - x
        P += weight * (belief.P[np.ix_(idx, idx)] + np.outer(d, d))
    return x, 0.5 * (P + P.T)


def imm_mix(beliefs: Sequence[ModeBelief], pi: np.ndarray,
            common: Optional[Sequence[int]] = COMMON_INDICES,
            mu_floor: float = 1e-6) -> Tuple[List[ModeBelief], np.ndarray]:
    """
    Mixing step: returns the mixed beliefs and the normalizers c.

    Components outside `common` (r_ref) are not mixed; their cross-covariance with the
    common block is scaled by the mode's self-mixing weight. A mode with c = 0 is
    reinitialized from the fused belief with c raised to `mu_floor`, and c renormalized.
    """
    mu = np.array([b.mu for b in beliefs])
    if abs(mu.sum() - 1.0) > 1e-9:
        raise FilterError(f'mode probabilities sum to {mu.sum():.12f}, expected 1')
    pi = np.asarray(pi, dtype=float)
    size = beliefs[0].z.size
    idx = _indices(common, size)
    own = np.setdiff1d(np.arange(size), idx)
    c = mu @ pi

    mixed = []
    for i, belief in enumerate(beliefs):
        z = belief.z.copy()
        P = belief.P.copy()
        if c[i] <= 0.0:
            x, Pc = fuse(beliefs, mu, idx)
            z[idx] = x
            P[np.ix_(idx, idx)] = Pc
            P[np.ix_(own, idx)] = 0.0
            P[np.ix_(idx, own)] = 0.0
            logger.info('Unreachable mode reinitialized from fused belief',
                        extra={'mode_index': i, 'mu_floor': mu_floor})
            mixed.append(replace(belief, z=z, P=P))
            continue
        weights = pi[:, i] * mu / c[i]
        means = np.stack([b.z[idx] for b in beliefs])
        x = weights @ means
        Pc = np.zeros((idx.size, idx.size))
        for w, b, mean in zip(weights, beliefs, means):
            d = mean - x
            Pc += w * (b.P[np.ix_(idx, idx)] + np.outer(d, d))
        z[idx] = x
        P[np.ix_(idx, idx)] = Pc
        P[np.ix_(own, idx)] *= weights[i]
        P[np.ix_(idx, own)] *= weights[i]
        mixed.append(replace(belief, z=z, P=P))

    if np.any(c <= 0.0):
        c = np.maximum(c, mu_floor)
        c = c / c.sum()
    return mixed, c


def _cholesky(S):
    try:
        return linalg.cho_factor(S, lower=True)
    except linalg.LinAlgError:
        raise FilterError('residual covariance is not positive definite; '
                          'measurement noise must regularize it')


def mode_predict_update(belief: ModeBelief, dyn: ModeDynamics, y: np.ndarray,
                        Q: np.ndarray, R: np.ndarray
                        ) -> Tuple[ModeBelief, np.ndarray, np.ndarray]:
    """
    One Kalman predict/update cycle with a full-state measurement (H = I).

    Returns:
        (posterior belief, residual y - z_pred, residual covariance S)

    Raises:
        FilterError: S is not positive definite
    """
    z_pred = dyn.step(belief.z)
    P_pred = dyn.F @ belief.P @ dyn.F.T + Q
    S = P_pred + R
    S = 0.5 * (S + S.T)
    factor = _cholesky(S)
    # L = P_pred S^-1; both symmetric
    L = linalg.cho_solve(factor, P_pred).T
    residual = np.asarray(y, dtype=float) - z_pred
    z_post = z_pred + L @ residual
    P_post = (np.eye(z_pred.size) - L) @ P_pred
    posterior = ModeBelief(z=z_post, P=0.5 * (P_post + P_post.T), mu=belief.mu)
    return posterior, residual, S


def log_likelihood(residual: np.ndarray, S: np.ndarray) -> float:
    """Gaussian log density of a residual, log-determinant through Cholesky."""
    factor = _cholesky(S)
    diag = np.diag(factor[0])
    if np.any(diag <= 0.0):
        raise FilterError('residual covariance is not positive definite')
    mahalanobis = float(residual @ linalg.cho_solve(factor, residual))
    log_det = 2.0 * float(np.sum(np.log(diag)))
    return -0.5 * (mahalanobis + log_det + residual.size * np.log(2.0 * np.pi))


def update_probabilities(residuals: Sequence[np.ndarray], covariances: Sequence[np.ndarray],
                         c: Sequence[float]) -> np.ndarray:
    """
    Posterior mode probabilities from residual likelihoods and mixing normalizers.

    If every likelihood underflows the result is uniform over the modes with the largest c.
    """
    c = np.asarray(c, dtype=float)
    with np.errstate(divide='ignore'):
        log_c = np.log(c)
    logs = np.array([
        log_c[i] + log_likelihood(np.asarray(r, dtype=float), np.asarray(S, dtype=float))
        for i, (r, S) in enumerate(zip(residuals, covariances))
    ])
    if not np.any(np.isfinite(logs)):
        best = np.isclose(c, c.max(), rtol=0.0, atol=1e-15)
        mu = best / best.sum()
        logger.warning('All mode likelihoods underflowed, uniform fallback',
                       extra={'modes': np.flatnonzero(best).tolist()})
        return mu.astype(float)
    mu = np.exp(logs - logsumexp(logs[np.isfinite(logs)]))
    mu[~np.isfinite(logs)] = 0.0
    return mu / mu.sum()


def standstill_clamp(previous: np.ndarray, z: np.ndarray) -> np.ndarray:
    """
    Stop a vehicle whose predicted speed turned negative: v and any braking acceleration
    are zeroed and the position never moves backwards.
    """
    if z[V_LON] >= 0.0:
        return z
    z = z.copy()
    z[V_LON] = 0.0
    z[A_LON] = max(z[A_LON], 0.0)
    z[P_LON] = max(z[P_LON], previous[P_LON])
    return z


def predict_horizon(z0: np.ndarray, dyns: Union[ModeDynamics, Sequence[ModeDynamics]],
                    n_steps: Optional[int] = None, standstill: bool = True) -> np.ndarray:
    """
    Propagate an estimate through a sequence of (possibly time-varying) mode models.

    Args:
        z0: starting estimate
        dyns: one ModeDynamics per step, or a single one repeated `n_steps` times
        n_steps: horizon length when `dyns` is a single model
        standstill: clamp the longitudinal speed at zero after every step

    Returns:
        Array of shape (steps + 1, len(z0)); row 0 is z0
    """
    if isinstance(dyns, ModeDynamics):
        if n_steps is None:
            raise ModelError('n_steps is required with a single model')
        dyns = [dyns] * n_steps
    elif n_steps is not None and n_steps != len(dyns):
        raise ModelError(f'{len(dyns)} models given for a {n_steps}-step horizon')
    z = np.asarray(z0, dtype=float).copy()
    trajectory = [z]
    for dyn in dyns:
        z_next = dyn.step(z)
        z = standstill_clamp(z, z_next) if standstill else z_next
        trajectory.append(z)
    return np.stack(trajectory)


def state_transition(dyns: Sequence[ModeDynamics]) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """
    Affine maps z_t = Phi_t z_0 + c_t of a model sequence, t = 0..len(dyns).
    """
    size = dyns[0].F.shape[0] if dyns else 7
    Phi = [np.eye(size)]
    offsets = [np.zeros(size)]
    for dyn in dyns:
        Phi.append(dyn.F @ Phi[-1])
        offsets.append(dyn.F @ offsets[-1] + dyn.offset)
    return Phi, offsets


def pseudo_r_measurement(mode_longitudinal: str, v_lon: float, p_lon: float,
                         lead_p: Optional[float] = None, lead_v: Optional[float] = None) -> float:
    """
    Measurement of r_ref under a mode: the speed itself for VT, the time gap
    (p_lead - p) / v_lead for DK, clamped at zero.
    """
    if mode_longitudinal == 'VT':
        return max(float(v_lon), 0.0)
    if lead_p is None or lead_v is None:
        raise ModelError('DK r_ref measurement needs the lead vehicle position and speed')
    return max((float(lead_p) - float(p_lon)) / max(float(lead_v), 0.1), 0.0)


def noise_diagonal(values: Sequence[float], dk_r: float, is_dk: bool) -> np.ndarray:
    diag = np.asarray(values, dtype=float).copy()
    if is_dk:
        diag[R_REF] = dk_r
    return np.diag(diag)

