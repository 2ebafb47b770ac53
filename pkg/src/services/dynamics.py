"""
Nominal dynamic unicycle model for skid-steer robots.

The continuous model couples the pose kinematics

    X' = v cos(theta) - a omega sin(theta)
    Y' = v sin(theta) + a omega cos(theta)
    theta' = omega

with first-order velocity dynamics driven by the commanded velocities

    v'     = (c3/c1) omega^2 - (c4/c1) v + v_ref / c1
    omega' = -(c5/c2) v omega - (c6/c2) omega + omega_ref / c2

Terrain effects (skid and slip) are left out here; they are learned as
residuals by the GP layer. This module also owns the discrete map f(x, u)
and the offline identification of c1..c6.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import least_squares
from scipy.signal import lfilter

from src.errors import InsufficientExcitationError, ValidationError
from src.models.state import (
    OMEGA, STATE_DIM, THETA, V, Control, State5, as_control_array, wrap_angle,
)

logger = logging.getLogger(__name__)

INTEGRATORS = ('rk4', 'euler')
MIN_IDENTIFICATION_SAMPLES = 50
MAX_CONDITION_NUMBER = 1e10

# (states (B, 5), controls (B, 2)) -> additive velocity-rate disturbance (B, 2)
Disturbance = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class DynamicParams:
    """Lumped physical constants c1..c6 and the COM-to-rear-axle distance a"""
    c: Tuple[float, ...]
    a: float = 0.0

    def __post_init__(self):
        c = tuple(float(value) for value in self.c)
        if len(c) != 6:
            raise ValidationError(f'expected 6 dynamic parameters, got {len(c)}')
        if not all(math.isfinite(value) for value in c) or not math.isfinite(self.a):
            raise ValidationError('dynamic parameters must be finite')
        if c[0] <= 0 or c[1] <= 0:
            raise ValidationError(f'c1 and c2 must be positive, got c1={c[0]}, c2={c[1]}')
        if self.a < 0:
            raise ValidationError(f'COM offset a must be non-negative, got {self.a}')
        object.__setattr__(self, 'c', c)
        object.__setattr__(self, 'a', float(self.a))

    def to_dict(self):
        return {'c': list(self.c), 'a': self.a}

    @classmethod
    def from_dict(cls, data) -> 'DynamicParams':
        if 'c' not in data:
            raise ValidationError('parameter record is missing "c"')
        return cls(tuple(data['c']), float(data.get('a', 0.0)))


def _check_finite(*values):
    for value in values:
        if not np.all(np.isfinite(np.asarray(value, dtype=float))):
            raise ValidationError('dynamics inputs must be finite')


def kinematic_rates(q, v: float, omega: float, a: float) -> np.ndarray:
    """[X', Y', theta'] for pose q = [X, Y, theta]"""
    q = np.asarray(q, dtype=float)
    _check_finite(q, v, omega, a)
    theta = q[2]
    return np.array([
        v * math.cos(theta) - a * omega * math.sin(theta),
        v * math.sin(theta) + a * omega * math.cos(theta),
        omega,
    ])


def dynamic_rates_nominal(eta, u, params: DynamicParams) -> np.ndarray:
    """[v', omega'] of the disturbance-free velocity dynamics"""
    v, omega = np.asarray(eta, dtype=float)
    v_ref, omega_ref = as_control_array(u)
    _check_finite(v, omega, v_ref, omega_ref)
    c1, c2, c3, c4, c5, c6 = params.c
    if c1 == 0 or c2 == 0:
        raise ValidationError('c1 and c2 must be non-zero')
    return np.array([
        (c3 / c1) * omega ** 2 - (c4 / c1) * v + v_ref / c1,
        -(c5 / c2) * v * omega - (c6 / c2) * omega + omega_ref / c2,
    ])


def state_rates(states: np.ndarray, controls: np.ndarray, params: DynamicParams,
                disturbance: Optional[Disturbance] = None) -> np.ndarray:
    """Batched continuous-time derivative of State5 rows under per-row controls"""
    c1, c2, c3, c4, c5, c6 = params.c
    a = params.a
    theta = states[:, THETA]
    v = states[:, V]
    omega = states[:, OMEGA]
    v_ref = controls[:, 0]
    omega_ref = controls[:, 1]
    cos_t = np.cos(theta)
    sin_t = np.sin(theta)
    rates = np.empty_like(states)
    rates[:, 0] = v * cos_t - a * omega * sin_t
    rates[:, 1] = v * sin_t + a * omega * cos_t
    rates[:, 2] = omega
    rates[:, 3] = (c3 / c1) * omega ** 2 - (c4 / c1) * v + v_ref / c1
    rates[:, 4] = -(c5 / c2) * v * omega - (c6 / c2) * omega + omega_ref / c2
    if disturbance is not None:
        rates[:, 3:] += disturbance(states, controls)
    return rates


def step_array(states, u, params: DynamicParams, dt: float, method: str = 'rk4',
               substeps: int = 1, disturbance: Optional[Disturbance] = None) -> np.ndarray:
    """
    Discrete map f(x, u) for one state (5,) or a batch (B, 5).

    u is a single control (2,) shared by the batch or one control per row
    (B, 2). Controls are held constant over dt; theta is wrapped once at the
    end of the step.
    """
    if dt <= 0:
        raise ValidationError(f'dt must be positive, got {dt}')
    if method not in INTEGRATORS:
        raise ValidationError(f'unknown integrator {method!r}, expected one of {INTEGRATORS}')
    if substeps < 1:
        raise ValidationError(f'substeps must be >= 1, got {substeps}')
    x = np.array(states, dtype=float, copy=True)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != STATE_DIM:
        raise ValidationError(f'states must have {STATE_DIM} columns, got {x.shape}')
    controls = np.asarray(u.as_array() if isinstance(u, Control) else u, dtype=float)
    controls = np.broadcast_to(np.atleast_2d(controls), (x.shape[0], 2))
    _check_finite(x, controls)

    h = dt / substeps
    for _ in range(substeps):
        if method == 'euler':
            x = x + h * state_rates(x, controls, params, disturbance)
        else:
            k1 = state_rates(x, controls, params, disturbance)
            k2 = state_rates(x + 0.5 * h * k1, controls, params, disturbance)
            k3 = state_rates(x + 0.5 * h * k2, controls, params, disturbance)
            k4 = state_rates(x + h * k3, controls, params, disturbance)
            x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    x[:, THETA] = wrap_angle(x[:, THETA])
    return x[0] if single else x


def step_nominal(x: State5, u: Control, params: DynamicParams, dt: float, method: str = 'rk4') -> State5:
    return State5.from_array(step_array(x.as_array(), u, params, dt, method=method))


@dataclass
class LowPassFilter:
    """First-order exponential filter y_k = beta * x_k + (1 - beta) * y_{k-1}"""
    beta: float = 0.2
    state: Optional[float] = field(default=None)

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ValidationError(f'filter beta must lie in (0, 1], got {self.beta}')

    def update(self, sample: float) -> float:
        if self.state is None:
            self.state = float(sample)
        else:
            self.state = self.beta * float(sample) + (1.0 - self.beta) * self.state
        return self.state

    def reset(self):
        self.state = None


def lowpass(filter: LowPassFilter, sample: float) -> float:
    return filter.update(sample)


def lowpass_array(samples, beta: float, axis: int = 0) -> np.ndarray:
    """Apply the same first-order filter along an axis; the first output equals the first sample"""
    if not 0.0 < beta <= 1.0:
        raise ValidationError(f'filter beta must lie in (0, 1], got {beta}')
    x = np.asarray(samples, dtype=float)
    if x.shape[axis] == 0:
        return x.copy()
    first = np.take(x, [0], axis=axis)
    zi = (1.0 - beta) * first
    y, _ = lfilter([beta], [1.0, -(1.0 - beta)], x, axis=axis, zi=zi)
    return y


class IdentificationSample(NamedTuple):
    eta: np.ndarray
    eta_dot: np.ndarray
    u: np.ndarray


@dataclass(frozen=True)
class IdentificationLog:
    """
    Identification records plus, when available, the raw uniformly sampled
    velocity and command sequences they were built from (used by the
    output-error refinement).
    """
    samples: Tuple[IdentificationSample, ...]
    dt: float
    etas: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.samples)


def identification_log(etas, controls, dt: float) -> IdentificationLog:
    """
    Build identification records from velocities sampled every dt.

    Each interval [k-1, k] yields one record: the backward difference as the
    rate proxy, the interval-midpoint velocity and the command held over the
    interval.
    """
    etas = np.asarray(etas, dtype=float)
    controls = np.asarray(controls, dtype=float)
    if etas.ndim != 2 or etas.shape[1] != 2 or controls.shape != etas.shape:
        raise ValidationError(f'expected matching (N, 2) velocity and command arrays, got {etas.shape}, {controls.shape}')
    if dt <= 0:
        raise ValidationError(f'dt must be positive, got {dt}')
    mid = 0.5 * (etas[1:] + etas[:-1])
    proxy = np.diff(etas, axis=0) / dt
    samples = tuple(
        IdentificationSample(mid[k], proxy[k], controls[k])
        for k in range(len(mid))
    )
    return IdentificationLog(samples=samples, dt=dt, etas=etas.copy(), controls=controls.copy())


class IdentificationResult(NamedTuple):
    params: DynamicParams
    relative_residual: float
    linear_relative_residual: float
    condition_number: float
    n_rows: int
    refined: bool

    def to_dict(self):
        return {
            'params': self.params.to_dict(),
            'relative_residual': self.relative_residual,
            'linear_relative_residual': self.linear_relative_residual,
            'condition_number': self.condition_number,
            'n_rows': self.n_rows,
            'refined': self.refined,
        }


def _regressor(log: Sequence[IdentificationSample], filter_beta: float):
    eta = np.array([s.eta for s in log], dtype=float)
    eta_dot = np.array([s.eta_dot for s in log], dtype=float)
    u = np.array([s.u for s in log], dtype=float)
    v, omega = eta[:, 0], eta[:, 1]
    zeros = np.zeros_like(v)
    phi_v = np.column_stack([eta_dot[:, 0], zeros, -omega ** 2, v, zeros, zeros])
    phi_w = np.column_stack([zeros, eta_dot[:, 1], zeros, zeros, v * omega, omega])
    # Both sides go through the same filter
    phi = np.vstack([lowpass_array(phi_v, filter_beta), lowpass_array(phi_w, filter_beta)])
    rhs = np.concatenate([lowpass_array(u[:, 0], filter_beta), lowpass_array(u[:, 1], filter_beta)])
    return phi, rhs, u


def _simulate_windows(c, a, etas, controls, dt, window, method):
    params = DynamicParams(tuple(c), a)
    starts = np.arange(0, len(etas) - 1, window)
    lengths = np.minimum(window, len(etas) - 1 - starts)
    states = np.zeros((len(starts), STATE_DIM))
    states[:, V:] = etas[starts]
    predicted = np.zeros((len(starts), window, 2))
    for step in range(window):
        active = step < lengths
        idx = np.minimum(starts + step, len(controls) - 1)
        states = step_array(states, controls[idx], params, dt, method=method)
        predicted[:, step] = states[:, V:]
        predicted[~active, step] = 0.0
    return starts, lengths, predicted


def _output_error(c, a, etas, controls, dt, window, method):
    starts, lengths, predicted = _simulate_windows(c, a, etas, controls, dt, window, method)
    residuals = []
    for w, (start, length) in enumerate(zip(starts, lengths)):
        measured = etas[start + 1:start + 1 + length]
        residuals.append((predicted[w, :length] - measured).ravel())
    return np.concatenate(residuals)


def identify_params(log, filter_beta: float = 0.2, refine: bool = True, a: float = 0.0,
                    window: int = 50, method: str = 'rk4') -> IdentificationResult:
    """
    Identify c1..c6 from velocity/command records.

    The model is linear in c once rearranged as

        c1 v' - c3 omega^2 + c4 v         = v_ref
        c2 omega' + c5 v omega + c6 omega = omega_ref

    Both sides are low-pass filtered and solved by ordinary least squares.
    With refine=True and raw sequences available, the estimate then seeds an
    output-error fit of simulated velocity windows against the log.
    """
    samples = log.samples if isinstance(log, IdentificationLog) else tuple(log)
    if len(samples) < MIN_IDENTIFICATION_SAMPLES:
        raise ValidationError(
            f'identification needs at least {MIN_IDENTIFICATION_SAMPLES} records, got {len(samples)}')

    phi, rhs, u = _regressor(samples, filter_beta)
    if np.var(u[:, 0]) <= 1e-12 or np.var(u[:, 1]) <= 1e-12:
        raise InsufficientExcitationError(
            'insufficient excitation: both v_ref and omega_ref must vary over the log')
    scale = np.linalg.norm(phi, axis=0)
    if np.any(scale == 0):
        raise InsufficientExcitationError('insufficient excitation: a regressor column is identically zero')
    condition = float(np.linalg.cond(phi / scale))
    if not np.isfinite(condition) or condition > MAX_CONDITION_NUMBER:
        raise InsufficientExcitationError(f'insufficient excitation: regressor condition number {condition:.3e}')

    solution, *_ = np.linalg.lstsq(phi / scale, rhs, rcond=None)
    c = solution / scale
    linear_residual = float(np.linalg.norm(phi @ c - rhs) / max(np.linalg.norm(rhs), 1e-300))
    if c[0] <= 0 or c[1] <= 0:
        raise InsufficientExcitationError(f'identified c1={c[0]:.3g}, c2={c[1]:.3g}; inputs must be positive')
    logger.info('Linear identification: c=%s, relative residual %.3e, cond %.3e',
                np.array2string(c, precision=4), linear_residual, condition)

    relative_residual = linear_residual
    refined = False
    if refine and isinstance(log, IdentificationLog) and log.etas is not None:
        etas, controls = log.etas, log.controls
        lower = np.array([1e-9, 1e-9, -np.inf, -np.inf, -np.inf, -np.inf])
        result = least_squares(
            _output_error, c, args=(a, etas, controls, log.dt, window, method),
            bounds=(lower, np.full(6, np.inf)), x_scale='jac', xtol=1e-12, ftol=1e-12, gtol=1e-12)
        measured_norm = max(float(np.linalg.norm(etas[1:])), 1e-300)
        candidate = float(np.linalg.norm(result.fun) / measured_norm)
        c = result.x
        relative_residual = candidate
        refined = True
        logger.info('Output-error refinement: c=%s, relative residual %.3e (%d evaluations)',
                    np.array2string(c, precision=4), candidate, result.nfev)

    return IdentificationResult(
        params=DynamicParams(tuple(float(x) for x in c), a),
        relative_residual=relative_residual,
        linear_relative_residual=linear_residual,
        condition_number=condition,
        n_rows=int(phi.shape[0]),
        refined=refined,
    )
