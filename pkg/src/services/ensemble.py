"""
Online weighting of per-terrain residual GPs.

Each step the weights w solve

    min_w ||Y_v - F_v w||^2 + ||Y_omega - F_omega w||^2 + alpha ||w - w_prev||_1
    s.t.  0 <= w_i <= 1, sum(w) = 1

over the last K motion records. The problem is solved by accelerated
proximal gradient with the exact prox of the trust term on the simplex,
followed by an active-set polish of the reduced KKT system.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.errors import ConvergenceError, ValidationError
from src.models.state import STATE_DIM, Gaussian2
from src.services.dynamics import DynamicParams, step_array
from src.services.gpr import INPUT_DIM, GpResidualModel

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-8
POLISH_THRESHOLDS = (1e-4, 1e-6, 1e-9)


@dataclass(frozen=True, eq=False)
class EnsembleWeights:
    w: np.ndarray
    timestamp: int = 0

    def __post_init__(self):
        w = np.array(self.w, dtype=float).reshape(-1)
        if w.size < 1 or not np.all(np.isfinite(w)):
            raise ValidationError('weights must be a non-empty finite vector')
        if w.min() < -SIMPLEX_TOL or w.max() > 1 + SIMPLEX_TOL or abs(w.sum() - 1.0) > SIMPLEX_TOL:
            raise ValidationError(f'weights must lie on the probability simplex, got {w.tolist()}')
        w.flags.writeable = False
        object.__setattr__(self, 'w', w)

    @classmethod
    def uniform(cls, m: int, timestamp: int = 0) -> 'EnsembleWeights':
        if m < 1:
            raise ValidationError(f'need at least one terrain, got {m}')
        return cls(np.full(m, 1.0 / m), timestamp)

    def __len__(self):
        return self.w.size

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.w))

    def to_dict(self):
        return {'w': self.w.tolist(), 'timestamp': self.timestamp}


class HistoryRecord(NamedTuple):
    z: np.ndarray
    v_next: float
    omega_next: float


class MotionHistory:
    """Ring buffer of the last K (z, measured next velocities) records"""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValidationError(f'history capacity must be >= 1, got {capacity}')
        self.capacity = capacity
        self._records = deque(maxlen=capacity)

    def push(self, record: HistoryRecord):
        z = np.asarray(record.z, dtype=float).reshape(-1)
        if z.shape != (INPUT_DIM,):
            raise ValidationError(f'history record z must have {INPUT_DIM} entries, got {z.shape}')
        if not (np.all(np.isfinite(z)) and np.isfinite(record.v_next) and np.isfinite(record.omega_next)):
            raise ValidationError('history records must be finite')
        self._records.append(HistoryRecord(z, float(record.v_next), float(record.omega_next)))

    def clear(self):
        self._records.clear()

    def __len__(self):
        return len(self._records)

    @property
    def is_full(self) -> bool:
        return len(self._records) == self.capacity

    @property
    def records(self) -> List[HistoryRecord]:
        return list(self._records)

    def arrays(self) -> Tuple[np.ndarray, np.ndarray]:
        z = np.array([r.z for r in self._records], dtype=float).reshape(-1, INPUT_DIM)
        measured = np.array([[r.v_next, r.omega_next] for r in self._records], dtype=float).reshape(-1, 2)
        return z, measured


@dataclass(frozen=True)
class TerrainGpBank:
    entries: Tuple[GpResidualModel, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValidationError('a terrain bank needs at least one terrain')
        object.__setattr__(self, 'entries', entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def labels(self) -> List[str]:
        return [entry.label for entry in self.entries]

    def index(self, label: str) -> Optional[int]:
        labels = self.labels
        return labels.index(label) if label in labels else None

    def to_dict(self):
        return {'terrains': [entry.to_dict() for entry in self.entries]}

    @classmethod
    def from_dict(cls, data) -> 'TerrainGpBank':
        return cls(tuple(GpResidualModel.from_dict(entry) for entry in data['terrains']))


def _check_weights(bank: TerrainGpBank, weights: EnsembleWeights):
    if len(weights) != len(bank):
        raise ValidationError(f'{len(weights)} weights for a bank of {len(bank)} terrains')


def ensemble_predict_batch(bank: TerrainGpBank, weights: EnsembleWeights, z) -> Tuple[np.ndarray, np.ndarray]:
    """Weighted means (B, 2) and w^2-weighted covariances (B, 2, 2) for rows of z"""
    _check_weights(bank, weights)
    z = np.atleast_2d(np.asarray(z, dtype=float))
    mean = np.zeros((z.shape[0], 2))
    cov = np.zeros((z.shape[0], 2, 2))
    for w_i, entry in zip(weights.w, bank):
        if w_i == 0.0:
            continue
        mu, entry_cov = entry.residual_batch(z)
        mean += w_i * mu
        cov += w_i ** 2 * entry_cov
    return mean, cov


def ensemble_predict(bank: TerrainGpBank, weights: EnsembleWeights, z) -> Gaussian2:
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape != (INPUT_DIM,):
        raise ValidationError(f'query z must have {INPUT_DIM} entries, got {z.shape}')
    mean, cov = ensemble_predict_batch(bank, weights, z.reshape(1, -1))
    return Gaussian2(mean[0], cov[0])


class WeightProblem(NamedTuple):
    F_v: np.ndarray
    F_omega: np.ndarray
    Y_v: np.ndarray
    Y_omega: np.ndarray


def nominal_velocity_step(z: np.ndarray, params: DynamicParams, dt: float, method: str = 'rk4') -> np.ndarray:
    """One-step nominal (v, omega) prediction for rows z = [v, omega, v_ref, omega_ref]"""
    states = np.zeros((z.shape[0], STATE_DIM))
    states[:, 3:] = z[:, :2]
    return step_array(states, z[:, 2:], params, dt, method=method)[:, 3:]


def build_weight_problem(bank: TerrainGpBank, history: MotionHistory, params: DynamicParams,
                         dt: float, method: str = 'rk4') -> WeightProblem:
    if len(history) == 0:
        raise ValidationError('cannot build a weight problem from an empty history')
    z, measured = history.arrays()
    nominal = nominal_velocity_step(z, params, dt, method)
    columns = [nominal + entry.mean_batch(z) for entry in bank]
    return WeightProblem(
        F_v=np.column_stack([c[:, 0] for c in columns]),
        F_omega=np.column_stack([c[:, 1] for c in columns]),
        Y_v=measured[:, 0].copy(),
        Y_omega=measured[:, 1].copy(),
    )


def project_simplex(y) -> np.ndarray:
    """Euclidean projection onto the probability simplex (Michelot)"""
    y = np.asarray(y, dtype=float)
    active = y.copy()
    rho = (active.sum() - 1.0) / active.size
    while True:
        kept = active[active > rho]
        if kept.size == active.size:
            break
        active = kept
        rho = (active.sum() - 1.0) / active.size
    return np.maximum(y - rho, 0.0)


def _clipped_shrink(s: np.ndarray, center: np.ndarray, tau: float) -> np.ndarray:
    shrunk = np.where(s > center + tau, s - tau, np.where(s < center - tau, s + tau, center))
    return np.clip(shrunk, 0.0, 1.0)


def prox_simplex_l1(y, center, tau: float) -> np.ndarray:
    """
    argmin_w 0.5 ||w - y||^2 + tau ||w - center||_1 over the simplex.

    For a fixed sum multiplier nu each coordinate is the shrinkage of y_i - nu
    toward center_i, clipped to [0, 1]; the total is piecewise linear and
    non-increasing in nu, so nu is found exactly by a breakpoint search.
    """
    y = np.asarray(y, dtype=float)
    center = np.asarray(center, dtype=float)
    if tau < 0:
        raise ValidationError(f'prox weight must be non-negative, got {tau}')
    if tau == 0:
        return project_simplex(y)
    breakpoints = np.unique(np.concatenate([y + tau, y - center + tau, y - center - tau, y - 1.0 - tau]))
    totals = np.array([_clipped_shrink(y - nu, center, tau).sum() for nu in breakpoints])
    # totals[0] == M >= 1 and totals[-1] == 0
    above = np.flatnonzero(totals >= 1.0)
    j = above[-1]
    if totals[j] == 1.0 or j == len(breakpoints) - 1:
        nu = breakpoints[j]
    else:
        lo, hi = breakpoints[j], breakpoints[j + 1]
        nu = lo + (totals[j] - 1.0) * (hi - lo) / (totals[j] - totals[j + 1])
    return _clipped_shrink(y - nu, center, tau)


def weight_objective(w, F_v, F_omega, Y_v, Y_omega, w_prev, alpha: float) -> float:
    w = np.asarray(w, dtype=float)
    prev = w_prev.w if isinstance(w_prev, EnsembleWeights) else np.asarray(w_prev, dtype=float)
    r_v = Y_v - F_v @ w
    r_w = Y_omega - F_omega @ w
    return float(r_v @ r_v + r_w @ r_w + alpha * np.abs(w - prev).sum())


def _kkt_residual(x, hessian, linear, center, alpha, step) -> float:
    grad = hessian @ x - linear
    return float(np.linalg.norm(x - prox_simplex_l1(x - step * grad, center, step * alpha)))


def _polish(x, hessian, linear, center, alpha, threshold) -> Optional[np.ndarray]:
    """Solve the reduced KKT system for the active set guessed from x"""
    m = x.size
    fixed = np.full(m, np.nan)
    fixed[np.abs(x) <= threshold] = 0.0
    fixed[np.abs(x - 1.0) <= threshold] = 1.0
    if alpha > 0:
        at_center = np.isnan(fixed) & (np.abs(x - center) <= threshold)
        fixed[at_center] = center[at_center]
    free = np.isnan(fixed)
    if not free.any():
        candidate = fixed
        return candidate if abs(candidate.sum() - 1.0) <= SIMPLEX_TOL else None
    sign = np.sign(x - center) if alpha > 0 else np.zeros(m)
    held = np.where(free, 0.0, fixed)
    n_free = int(free.sum())
    system = np.zeros((n_free + 1, n_free + 1))
    system[:n_free, :n_free] = hessian[np.ix_(free, free)]
    system[:n_free, n_free] = 1.0
    system[n_free, :n_free] = 1.0
    rhs = np.empty(n_free + 1)
    rhs[:n_free] = linear[free] - hessian[free] @ held - alpha * sign[free]
    rhs[n_free] = 1.0 - held.sum()
    solution, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    candidate = held.copy()
    candidate[free] = solution[:n_free]
    if candidate.min() < -1e-12 or candidate.max() > 1.0 + 1e-12:
        return None
    if alpha > 0 and np.any(sign[free] * (candidate[free] - center[free]) < -1e-12):
        return None
    return np.clip(candidate, 0.0, 1.0)


def solve_weights(F_v, F_omega, Y_v, Y_omega, w_prev: EnsembleWeights, alpha: float,
                  tol: float = 1e-8, max_iters: int = 10000) -> EnsembleWeights:
    """Global minimizer of the trust-regularized least squares over the simplex"""
    F_v = np.atleast_2d(np.asarray(F_v, dtype=float))
    F_omega = np.atleast_2d(np.asarray(F_omega, dtype=float))
    Y_v = np.asarray(Y_v, dtype=float).reshape(-1)
    Y_omega = np.asarray(Y_omega, dtype=float).reshape(-1)
    m = len(w_prev)
    if F_v.shape != F_omega.shape or F_v.shape != (Y_v.size, m) or Y_omega.size != Y_v.size:
        raise ValidationError(
            f'inconsistent weight problem: F_v {F_v.shape}, F_omega {F_omega.shape}, '
            f'Y_v {Y_v.shape}, Y_omega {Y_omega.shape}, {m} weights')
    if alpha < 0:
        raise ValidationError(f'alpha must be non-negative, got {alpha}')
    center = np.asarray(w_prev.w, dtype=float)
    timestamp = w_prev.timestamp + 1

    hessian = 2.0 * (F_v.T @ F_v + F_omega.T @ F_omega)
    linear = 2.0 * (F_v.T @ Y_v + F_omega.T @ Y_omega)
    lipschitz = float(np.linalg.eigvalsh(hessian).max()) if m else 0.0
    if lipschitz <= 0.0:
        # Data term is constant; the trust term alone is minimized at its center
        return EnsembleWeights(center.copy(), timestamp)
    step = 1.0 / lipschitz

    x = center.copy()
    y = x.copy()
    t = 1.0
    residual = _kkt_residual(x, hessian, linear, center, alpha, step)
    iteration = 0
    while residual > tol and iteration < max_iters:
        iteration += 1
        x_next = prox_simplex_l1(y - step * (hessian @ y - linear), center, step * alpha)
        if (y - x_next) @ (x_next - x) > 0:
            # Momentum points uphill: restart
            t = 1.0
            y = x_next.copy()
        else:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
            y = x_next + ((t - 1.0) / t_next) * (x_next - x)
            t = t_next
        x = x_next
        residual = _kkt_residual(x, hessian, linear, center, alpha, step)
        if iteration % 50 == 0 or residual <= tol * 1e4:
            for threshold in POLISH_THRESHOLDS:
                candidate = _polish(x, hessian, linear, center, alpha, threshold)
                if candidate is None:
                    continue
                candidate_residual = _kkt_residual(candidate, hessian, linear, center, alpha, step)
                if candidate_residual < residual:
                    x, residual = candidate, candidate_residual
                    y = x.copy()
                    t = 1.0
                    break

    if residual > tol:
        raise ConvergenceError(
            f'weight solver did not converge in {max_iters} iterations (KKT residual {residual:.3e})',
            last_iterate=x, residual=residual)
    logger.debug('Weights solved in %d iterations, KKT residual %.2e', iteration, residual)
    x = np.clip(x, 0.0, 1.0)
    return EnsembleWeights(x / x.sum(), timestamp)


def update(bank: TerrainGpBank, history: MotionHistory, w_prev: EnsembleWeights, alpha: float,
           new_record: HistoryRecord, params: DynamicParams, dt: float, method: str = 'rk4',
           tol: float = 1e-8, max_iters: int = 10000) -> EnsembleWeights:
    _check_weights(bank, w_prev)
    history.push(new_record)
    problem = build_weight_problem(bank, history, params, dt, method=method)
    return solve_weights(*problem, w_prev, alpha, tol=tol, max_iters=max_iters)


class EnsembleGp:
    """
    One robot stream's ensemble: a shared terrain bank plus the stream's own
    history and current weights. Usable wherever a residual source is taken.
    """

    def __init__(self, bank: TerrainGpBank, params: DynamicParams, dt: float, k: int = 10,
                 alpha: float = 1e-3, method: str = 'rk4', tol: float = 1e-8, max_iters: int = 10000,
                 weights: Optional[EnsembleWeights] = None):
        self.bank = bank
        self.params = params
        self.dt = dt
        self.alpha = alpha
        self.method = method
        self.tol = tol
        self.max_iters = max_iters
        self.history = MotionHistory(k)
        self.weights = weights if weights is not None else EnsembleWeights.uniform(len(bank))
        _check_weights(bank, self.weights)

    def reset(self):
        self.history.clear()
        self.weights = EnsembleWeights.uniform(len(self.bank))

    def observe(self, record: HistoryRecord) -> EnsembleWeights:
        self.weights = update(self.bank, self.history, self.weights, self.alpha, record, self.params,
                              self.dt, method=self.method, tol=self.tol, max_iters=self.max_iters)
        return self.weights

    def observe_many(self, records: Iterable[HistoryRecord]) -> List[EnsembleWeights]:
        return [self.observe(record) for record in records]

    def residual(self, z) -> Gaussian2:
        return ensemble_predict(self.bank, self.weights, z)

    def residual_batch(self, z) -> Tuple[np.ndarray, np.ndarray]:
        return ensemble_predict_batch(self.bank, self.weights, z)


def history_records(states: np.ndarray, controls: np.ndarray) -> List[HistoryRecord]:
    """Records (z(k), eta(k+1)) from consecutive rows of a (N, 5) state log"""
    records = []
    for k in range(len(states) - 1):
        z = np.concatenate([states[k, 3:], controls[k]])
        records.append(HistoryRecord(z, float(states[k + 1, 3]), float(states[k + 1, 4])))
    return records


def weights_frame_rows(trace: Sequence[EnsembleWeights], labels: Sequence[str]):
    return [dict(step=w.timestamp, **{f'w_{label}': float(value) for label, value in zip(labels, w.w)})
            for w in trace]
