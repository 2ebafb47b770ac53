"""
Gaussian belief propagation through the residual-augmented dynamics.

x(k+1) = f(x(k), u(k)) + [0, 0, 0, g_v, g_omega], with g drawn from a
residual source (nothing, a fixed Gaussian, one terrain's GPs or the
terrain ensemble). The sigma-point method augments the state with the
residual and uses 4n+1 points; a first-order linearization and a
Monte-Carlo oracle are provided for comparison.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, block_diag, cholesky, solve_triangular

from src.errors import NotPSDError, NumericalError, ValidationError
from src.models.state import (
    STATE_DIM, STATE_FIELDS, THETA, Gaussian2, GaussianBelief, as_control_array, wrap_angle,
)
from src.services.dynamics import DynamicParams, step_array

logger = logging.getLogger(__name__)

AUGMENT_JITTER = 1e-9
JACOBIAN_STEP = 1e-6
COVERAGE_RADIUS_SQ = 9.0
# Velocity rows of the state receive the residual
INJECTION = np.vstack([np.zeros((3, 2)), np.eye(2)])


class ResidualSource(Protocol):
    def residual(self, z) -> Gaussian2:
        ...

    def residual_batch(self, z) -> Tuple[np.ndarray, np.ndarray]:
        ...


class NominalResidual:
    """No residual: the nominal model alone"""

    def residual(self, z) -> Gaussian2:
        return Gaussian2.zero()

    def residual_batch(self, z):
        n = np.atleast_2d(z).shape[0]
        return np.zeros((n, 2)), np.zeros((n, 2, 2))


class ConstantResidual:
    """The same residual distribution at every query point"""

    def __init__(self, distribution: Gaussian2):
        self.distribution = distribution

    def residual(self, z) -> Gaussian2:
        return self.distribution

    def residual_batch(self, z):
        n = np.atleast_2d(z).shape[0]
        return (np.tile(self.distribution.mean, (n, 1)),
                np.tile(self.distribution.cov, (n, 1, 1)))


def _source(model_source) -> ResidualSource:
    return NominalResidual() if model_source is None else model_source


@dataclass(frozen=True)
class SigmaConfig:
    lam: float = 1.0
    n: int = STATE_DIM

    def __post_init__(self):
        if self.n < 1:
            raise ValidationError(f'state dimension must be >= 1, got {self.n}')
        if 2 * self.n + self.lam <= 0:
            raise ValidationError(f'2n + lambda must be positive, got n={self.n}, lambda={self.lam}')

    @property
    def n_points(self) -> int:
        return 4 * self.n + 1

    @property
    def spread(self) -> float:
        return math.sqrt(2 * self.n + self.lam)


def sigma_weights(config: SigmaConfig) -> np.ndarray:
    denominator = 2 * config.n + config.lam
    weights = np.full(config.n_points, 0.5 / denominator)
    weights[0] = config.lam / denominator
    return weights


def _query(mean: np.ndarray, u: np.ndarray) -> np.ndarray:
    return np.concatenate([mean[3:], u])


def _weighted_moments(points: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    mean = weights @ points
    mean[THETA] = math.atan2(weights @ np.sin(points[:, THETA]), weights @ np.cos(points[:, THETA]))
    residuals = points - mean
    residuals[:, THETA] = wrap_angle(residuals[:, THETA])
    cov = (weights[:, None] * residuals).T @ residuals
    return mean, 0.5 * (cov + cov.T)


def propagate_step(belief: GaussianBelief, u, gp_out: Gaussian2, params: DynamicParams, dt: float,
                   config: SigmaConfig = SigmaConfig(), method: str = 'rk4') -> GaussianBelief:
    """
    One sigma-point step over the augmented [state, residual] vector.

    The residual half of each point adds to the propagated velocities; its
    kinematic entries are structurally zero.
    """
    if config.n != STATE_DIM:
        raise ValidationError(f'sigma configuration must use n={STATE_DIM}, got {config.n}')
    u = as_control_array(u)
    n = STATE_DIM
    augmented_mean = np.concatenate([belief.mean, np.zeros(3), gp_out.mean])
    gp_block = np.zeros((n, n))
    gp_block[3:, 3:] = gp_out.cov
    augmented_cov = block_diag(belief.cov, gp_block)
    try:
        root = cholesky(augmented_cov + AUGMENT_JITTER * np.eye(2 * n), lower=True)
    except LinAlgError as exc:
        raise NotPSDError('augmented covariance is not PSD') from exc

    offsets = config.spread * root.T
    points = np.vstack([augmented_mean, augmented_mean + offsets, augmented_mean - offsets])
    disturbance = points[:, n:].copy()
    disturbance[:, :3] = 0.0
    propagated = step_array(points[:, :n], u, params, dt, method=method) + disturbance
    mean, cov = _weighted_moments(propagated, sigma_weights(config))
    return GaussianBelief(mean, cov)


@dataclass(frozen=True, eq=False)
class BeliefTrajectory:
    beliefs: Tuple[GaussianBelief, ...]
    controls: np.ndarray

    def __len__(self):
        return len(self.beliefs)

    def __getitem__(self, index) -> GaussianBelief:
        return self.beliefs[index]

    def means(self) -> np.ndarray:
        return np.array([b.mean for b in self.beliefs])

    def covs(self) -> np.ndarray:
        return np.array([b.cov for b in self.beliefs])

    def to_frame(self) -> pd.DataFrame:
        """step, mean columns, then the 15 upper-triangle covariance entries"""
        upper = np.triu_indices(STATE_DIM)
        rows = []
        for step, belief in enumerate(self.beliefs):
            row = {'step': step}
            row.update({f'mu_{name}': float(value) for name, value in zip(STATE_FIELDS, belief.mean)})
            row.update({f'cov_{STATE_FIELDS[i]}_{STATE_FIELDS[j]}': float(belief.cov[i, j]) for i, j in zip(*upper)})
            rows.append(row)
        return pd.DataFrame(rows)


def _controls(u_seq) -> np.ndarray:
    controls = np.array([as_control_array(u) for u in u_seq], dtype=float).reshape(-1, 2)
    if len(controls) < 1:
        raise ValidationError('a horizon needs at least one control')
    return controls


def propagate_horizon(belief0: GaussianBelief, u_seq, model_source=None, params: DynamicParams = None,
                      dt: float = 0.1, config: SigmaConfig = SigmaConfig(), method: str = 'rk4') -> BeliefTrajectory:
    """Iterate the sigma-point step, querying the residual at the propagated mean velocities"""
    if params is None:
        raise ValidationError('propagation needs dynamic parameters')
    source = _source(model_source)
    controls = _controls(u_seq)
    beliefs = [belief0]
    for u in controls:
        gp_out = source.residual(_query(beliefs[-1].mean, u))
        beliefs.append(propagate_step(beliefs[-1], u, gp_out, params, dt, config, method))
    return BeliefTrajectory(tuple(beliefs), controls)


def state_jacobian(mean: np.ndarray, u: np.ndarray, params: DynamicParams, dt: float,
                   method: str = 'rk4', h: float = JACOBIAN_STEP) -> np.ndarray:
    """Central-difference Jacobian of the discrete map at mean"""
    perturbations = h * np.eye(STATE_DIM)
    forward = step_array(mean + perturbations, u, params, dt, method=method)
    backward = step_array(mean - perturbations, u, params, dt, method=method)
    delta = forward - backward
    delta[:, THETA] = wrap_angle(delta[:, THETA])
    return (delta / (2.0 * h)).T


def propagate_linear(belief0: GaussianBelief, u_seq, model_source=None, params: DynamicParams = None,
                     dt: float = 0.1, method: str = 'rk4') -> BeliefTrajectory:
    """First-order propagation: S' = A S A^T + B S_gp B^T"""
    if params is None:
        raise ValidationError('propagation needs dynamic parameters')
    source = _source(model_source)
    controls = _controls(u_seq)
    beliefs = [belief0]
    for u in controls:
        belief = beliefs[-1]
        gp_out = source.residual(_query(belief.mean, u))
        jacobian = state_jacobian(belief.mean, u, params, dt, method)
        mean = step_array(belief.mean, u, params, dt, method=method)
        mean[3:] += gp_out.mean
        cov = jacobian @ belief.cov @ jacobian.T + INJECTION @ gp_out.cov @ INJECTION.T
        beliefs.append(GaussianBelief(mean, cov))
    return BeliefTrajectory(tuple(beliefs), controls)


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    """Sample paths (n_samples, N+1, 5)"""
    paths: np.ndarray
    seed: int

    @property
    def n_samples(self) -> int:
        return self.paths.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.paths[:, -1]

    def at(self, step: int) -> np.ndarray:
        return self.paths[:, step]

    def moments(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        """Sample mean and covariance with a circular heading mean"""
        samples = self.paths[:, step]
        weights = np.full(len(samples), 1.0 / len(samples))
        mean, cov = _weighted_moments(samples, weights)
        if len(samples) > 1:
            cov = cov * len(samples) / (len(samples) - 1)
        return mean, cov

    def to_frame(self) -> pd.DataFrame:
        n_samples, n_steps, _ = self.paths.shape
        frame = pd.DataFrame(self.paths.reshape(-1, STATE_DIM), columns=list(STATE_FIELDS))
        frame.insert(0, 'step', np.tile(np.arange(n_steps), n_samples))
        frame.insert(0, 'sample', np.repeat(np.arange(n_samples), n_steps))
        return frame


def _draw(means: np.ndarray, covs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    # eigh square root tolerates singular (e.g. zero) covariances
    values, vectors = np.linalg.eigh(covs)
    roots = vectors * np.sqrt(np.maximum(values, 0.0))[:, None, :]
    noise = rng.standard_normal(means.shape)
    return means + np.einsum('bij,bj->bi', roots, noise)


def monte_carlo_rollout(belief0: GaussianBelief, u_seq, model_source=None, params: DynamicParams = None,
                        dt: float = 0.1, n_samples: int = 250, seed: int = 0, query: str = 'sample',
                        method: str = 'rk4') -> MonteCarloResult:
    """
    Sample initial states and per-step residuals and integrate forward.

    query='sample' asks the residual source at each sample's own velocities;
    query='mean' asks once per step at the sample-mean velocities.
    """
    if params is None:
        raise ValidationError('rollouts need dynamic parameters')
    if n_samples < 1:
        raise ValidationError(f'n_samples must be >= 1, got {n_samples}')
    if query not in ('sample', 'mean'):
        raise ValidationError(f'query must be "sample" or "mean", got {query!r}')
    source = _source(model_source)
    controls = _controls(u_seq)
    rng = np.random.default_rng(seed)

    x = rng.multivariate_normal(belief0.mean, belief0.cov, size=n_samples, method='eigh')
    x[:, THETA] = wrap_angle(x[:, THETA])
    paths = np.empty((n_samples, len(controls) + 1, STATE_DIM))
    paths[:, 0] = x
    for step, u in enumerate(controls):
        if query == 'sample':
            z = np.column_stack([x[:, 3:], np.broadcast_to(u, (n_samples, 2))])
            means, covs = source.residual_batch(z)
        else:
            gp_out = source.residual(np.concatenate([x[:, 3:].mean(axis=0), u]))
            means = np.broadcast_to(gp_out.mean, (n_samples, 2))
            covs = np.broadcast_to(gp_out.cov, (n_samples, 2, 2))
        disturbance = _draw(np.asarray(means), np.asarray(covs), rng)
        x = step_array(x, u, params, dt, method=method)
        x[:, 3:] += disturbance
        paths[:, step + 1] = x
    return MonteCarloResult(paths, seed)


def coverage_fraction(belief: GaussianBelief, samples, dims: Sequence[int] = (0, 1)) -> float:
    """Fraction of samples within the 3-sigma ellipse of the belief's marginal over dims"""
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[0] == 0:
        raise ValidationError('coverage needs at least one sample')
    dims = list(dims)
    mean, cov = belief.marginal(dims)
    points = samples[:, dims] if samples.shape[1] == STATE_DIM else samples
    if points.shape[1] != len(dims):
        raise ValidationError(f'samples must have {STATE_DIM} or {len(dims)} columns, got {samples.shape}')
    scale = max(float(np.max(np.diag(cov))), 0.0)
    try:
        root = cholesky(cov, lower=True)
    except LinAlgError as exc:
        raise NumericalError('coverage needs an invertible covariance block') from exc
    if scale == 0.0 or np.min(np.diag(root)) ** 2 <= 1e-12 * scale:
        raise NumericalError('coverage needs an invertible covariance block')
    offsets = points - mean
    whitened = solve_triangular(root, offsets.T, lower=True)
    distance_sq = np.sum(whitened ** 2, axis=0)
    return float(np.mean(distance_sq <= COVERAGE_RADIUS_SQ))
