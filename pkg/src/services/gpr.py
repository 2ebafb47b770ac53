"""
Exact Gaussian-process regression of nominal-model residuals.

Two independent scalar GPs with a squared-exponential ARD kernel map
z = [v, omega, v_ref, omega_ref] to the one-step velocity residuals
g_v and g_omega. Hyperparameters live in log space so the marginal
likelihood can be minimized without constraints.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from scipy.spatial.distance import cdist, pdist, squareform
from sklearn.mixture import GaussianMixture
from sklearn.preprocessing import StandardScaler

from src.errors import NotPSDError, NumericalError, ValidationError
from src.models.state import Gaussian2
from src.services.dynamics import DynamicParams, step_array

logger = logging.getLogger(__name__)

INPUT_DIM = 4
INPUT_FIELDS = ('v', 'omega', 'v_ref', 'omega_ref')
JITTER_LADDER = (1e-10, 1e-8, 1e-6)
RESTART_RANGE = (1e-2, 1e2)
# Bounds for the log-hyperparameters seen by L-BFGS-B
LOG_BOUND = 12.0
LOG_NOISE_FLOOR = math.log(1e-10)
FAILED_OBJECTIVE = 1e25
# L-BFGS-B stopping rules
OPTIMIZER_FTOL = 1e-12
OPTIMIZER_GTOL = 1e-6


@dataclass(frozen=True, eq=False)
class GpHyperparams:
    """SE-ARD hyperparameters stored as logs: [log l_1..l_n], log sf^2, log sn^2"""
    log_length_scales: np.ndarray
    log_signal_variance: float
    log_noise_variance: float

    def __post_init__(self):
        log_ls = np.array(self.log_length_scales, dtype=float).reshape(-1)
        if log_ls.size == 0 or not np.all(np.isfinite(log_ls)):
            raise ValidationError('length scales must be finite and positive')
        if not math.isfinite(self.log_signal_variance):
            raise ValidationError('signal variance must be finite and positive')
        # A zero noise variance (log = -inf) is allowed; the factorization then fails on singular Gram matrices
        if math.isnan(self.log_noise_variance) or self.log_noise_variance == math.inf:
            raise ValidationError('noise variance must be finite and non-negative')
        log_ls.flags.writeable = False
        object.__setattr__(self, 'log_length_scales', log_ls)
        object.__setattr__(self, 'log_signal_variance', float(self.log_signal_variance))
        object.__setattr__(self, 'log_noise_variance', float(self.log_noise_variance))

    @classmethod
    def from_values(cls, length_scales, signal_variance: float, noise_variance: float) -> 'GpHyperparams':
        length_scales = np.asarray(length_scales, dtype=float).reshape(-1)
        if np.any(length_scales <= 0) or signal_variance <= 0 or noise_variance < 0:
            raise ValidationError(
                f'hyperparameters must be positive (noise non-negative), got '
                f'l={length_scales.tolist()}, sf2={signal_variance}, sn2={noise_variance}')
        log_noise = math.log(noise_variance) if noise_variance > 0 else -math.inf
        return cls(np.log(length_scales), math.log(signal_variance), log_noise)

    @classmethod
    def from_vector(cls, theta) -> 'GpHyperparams':
        theta = np.asarray(theta, dtype=float)
        return cls(theta[:-2], theta[-2], theta[-1])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.log_length_scales, [self.log_signal_variance, self.log_noise_variance]])

    @property
    def dim(self) -> int:
        return self.log_length_scales.size

    @property
    def length_scales(self) -> np.ndarray:
        return np.exp(self.log_length_scales)

    @property
    def signal_variance(self) -> float:
        return math.exp(self.log_signal_variance)

    @property
    def noise_variance(self) -> float:
        return math.exp(self.log_noise_variance)

    def to_dict(self):
        return {
            'length_scales': self.length_scales.tolist(),
            'signal_variance': self.signal_variance,
            'noise_variance': self.noise_variance,
        }

    @classmethod
    def from_dict(cls, data) -> 'GpHyperparams':
        return cls.from_values(data['length_scales'], data['signal_variance'], data['noise_variance'])


def se_kernel(z1, z2, hyper: GpHyperparams, include_noise: bool = False) -> float:
    z1 = np.asarray(z1, dtype=float).reshape(-1)
    z2 = np.asarray(z2, dtype=float).reshape(-1)
    if z1.shape != z2.shape or z1.size != hyper.dim:
        raise ValidationError(f'kernel inputs must both have {hyper.dim} entries, got {z1.shape} and {z2.shape}')
    r = (z1 - z2) / hyper.length_scales
    value = hyper.signal_variance * math.exp(-0.5 * float(r @ r))
    if include_noise:
        value += hyper.noise_variance
    return value


def _gram(inputs: np.ndarray, hyper: GpHyperparams) -> np.ndarray:
    # squareform mirrors the condensed upper triangle, so K is exactly symmetric
    scaled = inputs / hyper.length_scales
    sq_dist = squareform(pdist(scaled, 'sqeuclidean')) if len(inputs) > 1 else np.zeros((1, 1))
    return hyper.signal_variance * np.exp(-0.5 * sq_dist)


def _cross(test: np.ndarray, inputs: np.ndarray, hyper: GpHyperparams) -> np.ndarray:
    scaled = hyper.length_scales
    return hyper.signal_variance * np.exp(-0.5 * cdist(test / scaled, inputs / scaled, 'sqeuclidean'))


def _factor(gram: np.ndarray, noise_variance: float) -> Tuple[np.ndarray, float]:
    """Lower Cholesky factor of gram + noise*I, escalating jitter when noise > 0"""
    p = gram.shape[0]
    eye = np.eye(p)
    try:
        chol = cholesky(gram + noise_variance * eye, lower=True)
    except LinAlgError:
        chol = None
    if chol is not None:
        if noise_variance == 0:
            # Exactly singular Gram matrices can factor with a round-off pivot
            pivots = np.diag(chol) ** 2
            if pivots.min() <= 1e-12 * max(float(np.max(np.diag(gram))), 1e-300):
                raise NotPSDError('kernel matrix not PSD: singular Gram matrix with zero noise variance')
        return chol, 0.0
    if noise_variance == 0:
        raise NotPSDError('kernel matrix not PSD: singular Gram matrix with zero noise variance')
    for jitter in JITTER_LADDER:
        try:
            chol = cholesky(gram + (noise_variance + jitter) * eye, lower=True)
        except LinAlgError:
            continue
        logger.warning('Kernel matrix factored with jitter %.0e', jitter)
        return chol, jitter
    raise NotPSDError(f'kernel matrix not PSD after jitter escalation to {JITTER_LADDER[-1]:.0e}')


def _validate_training(inputs, targets) -> Tuple[np.ndarray, np.ndarray]:
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float).reshape(-1)
    if inputs.ndim == 1:
        inputs = inputs.reshape(-1, 1)
    if inputs.shape[0] < 1 or inputs.shape[0] != targets.shape[0]:
        raise ValidationError(f'need p >= 1 matching inputs and targets, got {inputs.shape} and {targets.shape}')
    if not (np.all(np.isfinite(inputs)) and np.all(np.isfinite(targets))):
        raise ValidationError('training inputs and targets must be finite')
    return inputs, targets


@dataclass(frozen=True, eq=False)
class GpModel:
    """
    A fitted GP. Training inputs are kept in their original units; the
    kernel sees (z - input_mean) / input_scale.
    """
    hyper: GpHyperparams
    train_inputs: np.ndarray
    train_targets: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    input_mean: np.ndarray
    input_scale: np.ndarray
    jitter: float = 0.0

    @property
    def n_train(self) -> int:
        return self.train_inputs.shape[0]

    def standardize(self, inputs) -> np.ndarray:
        return (np.asarray(inputs, dtype=float) - self.input_mean) / self.input_scale

    def to_dict(self):
        return {
            'hyper': self.hyper.to_dict(),
            'train_inputs': self.train_inputs.tolist(),
            'train_targets': self.train_targets.tolist(),
            'input_mean': self.input_mean.tolist(),
            'input_scale': self.input_scale.tolist(),
        }

    @classmethod
    def from_dict(cls, data) -> 'GpModel':
        inputs = np.asarray(data['train_inputs'], dtype=float)
        return _fit_with_stats(
            inputs, np.asarray(data['train_targets'], dtype=float), GpHyperparams.from_dict(data['hyper']),
            np.asarray(data['input_mean'], dtype=float), np.asarray(data['input_scale'], dtype=float))


def _fit_with_stats(inputs, targets, hyper, input_mean, input_scale) -> GpModel:
    scaled = (inputs - input_mean) / input_scale
    chol, jitter = _factor(_gram(scaled, hyper), hyper.noise_variance)
    alpha = cho_solve((chol, True), targets)
    arrays = [np.array(a, dtype=float) for a in (inputs, targets, chol, alpha, input_mean, input_scale)]
    for array in arrays:
        array.flags.writeable = False
    return GpModel(hyper, *arrays[:4], arrays[4], arrays[5], jitter)


def fit(inputs, targets, hyper: GpHyperparams, standardize: bool = False) -> GpModel:
    """Factor K + sn^2 I for the training set and cache alpha = (K + sn^2 I)^-1 y"""
    inputs, targets = _validate_training(inputs, targets)
    if inputs.shape[1] != hyper.dim:
        raise ValidationError(f'inputs have {inputs.shape[1]} columns, hyperparameters expect {hyper.dim}')
    if standardize:
        scaler = StandardScaler().fit(inputs)
        input_mean, input_scale = scaler.mean_, scaler.scale_
    else:
        input_mean, input_scale = np.zeros(inputs.shape[1]), np.ones(inputs.shape[1])
    return _fit_with_stats(inputs, targets, hyper, input_mean, input_scale)


def predict_batch(model: GpModel, z_test, include_noise: bool = False) -> Tuple[np.ndarray, np.ndarray]:
    """Posterior means and variances for test rows (B, n); variances clamped at zero"""
    z_test = np.atleast_2d(np.asarray(z_test, dtype=float))
    if z_test.shape[1] != model.hyper.dim:
        raise ValidationError(f'test inputs must have {model.hyper.dim} columns, got {z_test.shape}')
    k = _cross(model.standardize(z_test), model.standardize(model.train_inputs), model.hyper)
    mean = k @ model.alpha
    v = solve_triangular(model.chol, k.T, lower=True)
    variance = np.maximum(model.hyper.signal_variance - np.sum(v * v, axis=0), 0.0)
    if include_noise:
        variance = variance + model.hyper.noise_variance
    return mean, variance


def predict(model: GpModel, z_test, include_noise: bool = False) -> Tuple[float, float]:
    z_test = np.asarray(z_test, dtype=float).reshape(-1)
    mean, variance = predict_batch(model, z_test.reshape(1, -1), include_noise=include_noise)
    return float(mean[0]), float(variance[0])


class NlmlResult(NamedTuple):
    value: float
    gradient: np.ndarray
    data_fit: float


def negative_log_marginal_likelihood(inputs, targets, hyper: GpHyperparams) -> NlmlResult:
    """
    NLML and its gradient with respect to
    [log l_1..log l_n, log sf^2, log sn^2].
    """
    inputs, targets = _validate_training(inputs, targets)
    p, n = inputs.shape
    if n != hyper.dim:
        raise ValidationError(f'inputs have {n} columns, hyperparameters expect {hyper.dim}')
    gram = _gram(inputs, hyper)
    chol, _ = _factor(gram, hyper.noise_variance)
    alpha = cho_solve((chol, True), targets)
    data_fit = 0.5 * float(targets @ alpha)
    value = data_fit + float(np.sum(np.log(np.diag(chol)))) + 0.5 * p * math.log(2.0 * math.pi)

    # d NLML / d theta_j = 0.5 tr((K^-1 - alpha alpha^T) dK/dtheta_j)
    inner = cho_solve((chol, True), np.eye(p)) - np.outer(alpha, alpha)
    gradient = np.empty(n + 2)
    scaled = inputs / hyper.length_scales
    for i in range(n):
        sq = squareform(pdist(scaled[:, [i]], 'sqeuclidean')) if p > 1 else np.zeros((1, 1))
        gradient[i] = 0.5 * float(np.sum(inner * (gram * sq)))
    gradient[n] = 0.5 * float(np.sum(inner * gram))
    gradient[n + 1] = 0.5 * hyper.noise_variance * float(np.trace(inner))
    return NlmlResult(value, gradient, data_fit)


def _bounds(dim: int):
    return [(-LOG_BOUND, LOG_BOUND)] * (dim + 1) + [(LOG_NOISE_FLOOR, LOG_BOUND)]


def optimize_hyperparams(inputs, targets, init: GpHyperparams, max_iters: int = 200,
                         restarts: int = 3, seed: int = 0) -> GpHyperparams:
    """
    Minimize the NLML with L-BFGS-B in log space, from init and from
    `restarts` starts drawn log-uniformly over [1e-2, 1e2]; return the best.
    """
    inputs, targets = _validate_training(inputs, targets)
    if max_iters <= 0:
        return init

    def objective(theta):
        try:
            result = negative_log_marginal_likelihood(inputs, targets, GpHyperparams.from_vector(theta))
        except NumericalError:
            return FAILED_OBJECTIVE, np.zeros_like(theta)
        if not math.isfinite(result.value):
            return FAILED_OBJECTIVE, np.zeros_like(theta)
        return result.value, result.gradient

    rng = np.random.default_rng(seed)
    bounds = _bounds(init.dim)
    theta0 = init.to_vector()
    theta0[-1] = max(theta0[-1], LOG_NOISE_FLOOR)
    starts = [theta0]
    low, high = np.log(RESTART_RANGE[0]), np.log(RESTART_RANGE[1])
    for _ in range(restarts):
        starts.append(rng.uniform(low, high, size=init.dim + 2))

    best_theta, best_value = None, math.inf
    for index, start in enumerate(starts):
        result = minimize(objective, start, jac=True, method='L-BFGS-B', bounds=bounds,
                          options={'maxiter': max_iters, 'ftol': OPTIMIZER_FTOL, 'gtol': OPTIMIZER_GTOL})
        value = float(result.fun)
        logger.debug('NLML start %d: %.6g after %d iterations (%s)', index, value, result.nit, result.message)
        if value < FAILED_OBJECTIVE and value < best_value:
            best_theta, best_value = result.x, value
    if best_theta is None:
        raise NumericalError('hyperparameter optimization failed: kernel matrix not PSD from every start')
    return GpHyperparams.from_vector(best_theta)


class ResidualSample(NamedTuple):
    z: np.ndarray
    g_v: float
    g_omega: float


@dataclass(frozen=True)
class ResidualDataset:
    samples: Tuple[ResidualSample, ...]
    skipped: int = 0
    label: str = ''

    def __len__(self):
        return len(self.samples)

    @property
    def inputs(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, INPUT_DIM))
        return np.array([s.z for s in self.samples], dtype=float)

    @property
    def targets_v(self) -> np.ndarray:
        return np.array([s.g_v for s in self.samples], dtype=float)

    @property
    def targets_omega(self) -> np.ndarray:
        return np.array([s.g_omega for s in self.samples], dtype=float)


def build_residual_dataset(traj, params: DynamicParams, dt: float, method: str = 'rk4') -> ResidualDataset:
    """
    One-step residuals g = eta(k+1) - f_eta(x(k), u(k)) over consecutive
    records. Pairs separated by more than 1.5 dt are skipped and counted.
    """
    if len(traj) == 0:
        return ResidualDataset(samples=(), skipped=0, label=getattr(traj, 'label', ''))
    if not traj.has_velocities:
        raise ValidationError('residuals need derived velocities; run derive_velocities first')
    times = traj.times()
    states = traj.states()
    controls = traj.controls()
    if len(times) < 2:
        return ResidualDataset(samples=(), skipped=0, label=traj.label)
    gaps = np.diff(times)
    keep = gaps <= 1.5 * dt
    skipped = int(np.count_nonzero(~keep))
    if skipped:
        logger.warning('Skipped %d residual pairs with gaps over %.3f s in %s', skipped, 1.5 * dt, traj.label)
    index = np.flatnonzero(keep)
    predicted = step_array(states[index], controls[index], params, dt, method=method)
    residual = states[index + 1, 3:] - predicted[:, 3:]
    z = np.column_stack([states[index, 3:], controls[index]])
    samples = tuple(ResidualSample(z[i], float(residual[i, 0]), float(residual[i, 1])) for i in range(len(index)))
    return ResidualDataset(samples=samples, skipped=skipped, label=traj.label)


def select_training_subset(samples: Sequence[ResidualSample], k_clusters: int, seed: int = 0) -> List[ResidualSample]:
    """
    Fit a diagonal GMM on the z-vectors and keep, for each component mean,
    the nearest sample. Duplicate picks collapse, so the result holds at
    most k_clusters samples.
    """
    samples = list(samples)
    if not samples:
        raise ValidationError('cannot select a training subset from an empty sample set')
    if k_clusters < 1:
        raise ValidationError(f'k_clusters must be >= 1, got {k_clusters}')
    z = np.array([s.z for s in samples], dtype=float)
    _, first = np.unique(z, axis=0, return_index=True)
    distinct = np.sort(first)
    if k_clusters >= len(distinct):
        if k_clusters > len(samples):
            logger.warning('Only %d samples for %d clusters; using every distinct sample', len(samples), k_clusters)
        return [samples[i] for i in distinct]

    gmm = GaussianMixture(n_components=k_clusters, covariance_type='diag', max_iter=100, tol=1e-6,
                          init_params='k-means++', random_state=seed)
    gmm.fit(z)
    nearest = cdist(gmm.means_, z).argmin(axis=1)
    chosen = np.unique(nearest)
    logger.info('GMM subset: %d of %d samples from %d components', len(chosen), len(samples), k_clusters)
    return [samples[i] for i in chosen]


def diagonal_covariances(variances: np.ndarray) -> np.ndarray:
    """Stack rows of per-channel variances (B, d) into diagonal covariances (B, d, d)"""
    variances = np.asarray(variances, dtype=float)
    return variances[:, :, None] * np.eye(variances.shape[1])


@dataclass(frozen=True, eq=False)
class GpResidualModel:
    """Velocity and yaw-rate residual GPs trained on one terrain"""
    label: str
    gp_v: GpModel
    gp_omega: GpModel

    def residual_batch(self, z) -> Tuple[np.ndarray, np.ndarray]:
        """Predictive means (B, 2) and covariances (B, 2, 2), observation noise included"""
        mean_v, var_v = predict_batch(self.gp_v, z, include_noise=True)
        mean_w, var_w = predict_batch(self.gp_omega, z, include_noise=True)
        return np.column_stack([mean_v, mean_w]), diagonal_covariances(np.column_stack([var_v, var_w]))

    def residual(self, z) -> Gaussian2:
        means, covs = self.residual_batch(np.asarray(z, dtype=float).reshape(1, -1))
        return Gaussian2(means[0], covs[0])

    def mean_batch(self, z) -> np.ndarray:
        mean_v, _ = predict_batch(self.gp_v, z)
        mean_w, _ = predict_batch(self.gp_omega, z)
        return np.column_stack([mean_v, mean_w])

    def to_dict(self):
        return {'label': self.label, 'gp_v': self.gp_v.to_dict(), 'gp_omega': self.gp_omega.to_dict()}

    @classmethod
    def from_dict(cls, data) -> 'GpResidualModel':
        return cls(data['label'], GpModel.from_dict(data['gp_v']), GpModel.from_dict(data['gp_omega']))


def default_hyperparams(targets, dim: int = INPUT_DIM) -> GpHyperparams:
    variance = max(float(np.var(targets)), 1e-8)
    return GpHyperparams.from_values(np.ones(dim), variance, max(0.01 * variance, 1e-10))


def train_terrain_gp(residuals: ResidualDataset, label: Optional[str] = None, k_clusters: int = 100,
                     max_iters: int = 200, restarts: int = 3, seed: int = 0) -> GpResidualModel:
    """Subset selection, per-channel hyperparameter optimization and the final fits"""
    label = label or residuals.label
    if len(residuals) == 0:
        raise ValidationError(f'no residual samples to train terrain {label!r}')
    subset = select_training_subset(residuals.samples, k_clusters, seed=seed)
    inputs = np.array([s.z for s in subset], dtype=float)
    scaled = StandardScaler().fit_transform(inputs)
    models = []
    for channel, targets in (('v', np.array([s.g_v for s in subset])),
                             ('omega', np.array([s.g_omega for s in subset]))):
        hyper = optimize_hyperparams(scaled, targets, default_hyperparams(targets, inputs.shape[1]),
                                     max_iters=max_iters, restarts=restarts, seed=seed)
        logger.info('Terrain %s, g_%s: %s', label, channel, hyper.to_dict())
        models.append(fit(inputs, targets, hyper, standardize=True))
    return GpResidualModel(label, models[0], models[1])
