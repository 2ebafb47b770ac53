"""
Shared value types for robot state, commands and Gaussian beliefs.

All types are immutable: numpy payloads are copied on construction and
marked read-only.
"""

import math
from dataclasses import dataclass
from typing import ClassVar, NamedTuple, Sequence, Union

import numpy as np
from scipy.linalg import LinAlgError, cholesky

from src.errors import NotPSDError, ValidationError

ArrayLike = Union[Sequence[float], np.ndarray]

STATE_DIM = 5
STATE_FIELDS = ('X', 'Y', 'theta', 'v', 'omega')
THETA = 2
V = 3
OMEGA = 4

PSD_JITTER = 1e-9


def wrap_angle(theta):
    """Wrap an angle (or array of angles) into (-pi, pi]"""
    values = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValidationError(f'angle must be finite, got {theta!r}')
    wrapped = np.pi - np.mod(np.pi - values, 2.0 * np.pi)
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2.0 * np.pi, wrapped)
    if wrapped.ndim == 0:
        return float(wrapped)
    return wrapped


class PsdReport(NamedTuple):
    ok: bool
    min_eigenvalue: float

    def __bool__(self):
        return self.ok


def is_psd(matrix: ArrayLike, jitter: float = 0.0) -> PsdReport:
    """Cholesky-based PSD test of matrix + jitter*I, with the smallest eigenvalue for reporting"""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValidationError(f'expected a square matrix, got shape {m.shape}')
    if not np.all(np.isfinite(m)):
        return PsdReport(False, float('nan'))
    min_eig = float(np.linalg.eigvalsh(m).min()) if m.size else 0.0
    try:
        cholesky(m + jitter * np.eye(m.shape[0]), lower=True)
    except LinAlgError:
        return PsdReport(False, min_eig)
    return PsdReport(True, min_eig)


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.array(array, dtype=float, copy=True)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class State5:
    """Robot state [X, Y, theta, v, omega]; theta is kept in (-pi, pi]"""
    X: float
    Y: float
    theta: float
    v: float
    omega: float

    def __post_init__(self):
        values = (self.X, self.Y, self.theta, self.v, self.omega)
        if not all(math.isfinite(value) for value in values):
            raise ValidationError(f'state must be finite, got {values}')
        object.__setattr__(self, 'theta', wrap_angle(self.theta))

    @classmethod
    def from_array(cls, values: ArrayLike) -> 'State5':
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.shape != (STATE_DIM,):
            raise ValidationError(f'state vector must have {STATE_DIM} entries, got {arr.shape}')
        return cls(*(float(x) for x in arr))

    def as_array(self) -> np.ndarray:
        return np.array([self.X, self.Y, self.theta, self.v, self.omega])

    def to_dict(self):
        return {name: getattr(self, name) for name in STATE_FIELDS}


@dataclass(frozen=True)
class Control:
    """Commanded body-frame velocities"""
    v_ref: float
    omega_ref: float

    def __post_init__(self):
        if not (math.isfinite(self.v_ref) and math.isfinite(self.omega_ref)):
            raise ValidationError(f'control must be finite, got ({self.v_ref}, {self.omega_ref})')

    @classmethod
    def from_array(cls, values: ArrayLike) -> 'Control':
        arr = np.asarray(values, dtype=float).reshape(-1)
        if arr.shape != (2,):
            raise ValidationError(f'control vector must have 2 entries, got {arr.shape}')
        return cls(float(arr[0]), float(arr[1]))

    def as_array(self) -> np.ndarray:
        return np.array([self.v_ref, self.omega_ref])

    def within_bounds(self, v_max: float = 2.0, omega_max: float = 4.0) -> bool:
        return abs(self.v_ref) <= v_max and abs(self.omega_ref) <= omega_max

    def to_dict(self):
        return {'v_ref': self.v_ref, 'omega_ref': self.omega_ref}


def as_control_array(u) -> np.ndarray:
    if isinstance(u, Control):
        return u.as_array()
    arr = np.asarray(u, dtype=float).reshape(-1)
    if arr.shape != (2,):
        raise ValidationError(f'control vector must have 2 entries, got {arr.shape}')
    return arr


@dataclass(frozen=True, eq=False)
class _Gaussian:
    DIM: ClassVar[int] = 0
    ANGLE_INDEX: ClassVar[Union[int, None]] = None

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float).reshape(-1)
        cov = np.asarray(self.cov, dtype=float)
        if mean.shape != (self.DIM,) or cov.shape != (self.DIM, self.DIM):
            raise ValidationError(
                f'{type(self).__name__} expects mean ({self.DIM},) and cov ({self.DIM}, {self.DIM}), '
                f'got {mean.shape} and {cov.shape}')
        if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(cov))):
            raise ValidationError(f'{type(self).__name__} must be finite')
        cov = 0.5 * (cov + cov.T)
        report = is_psd(cov, PSD_JITTER)
        if not report:
            raise NotPSDError(
                f'{type(self).__name__} covariance is not PSD (min eigenvalue {report.min_eigenvalue:.3e})')
        if self.ANGLE_INDEX is not None:
            mean = mean.copy()
            mean[self.ANGLE_INDEX] = wrap_angle(mean[self.ANGLE_INDEX])
        object.__setattr__(self, 'mean', _frozen(mean))
        object.__setattr__(self, 'cov', _frozen(cov))

    def marginal(self, dims: Sequence[int]):
        idx = np.asarray(dims, dtype=int)
        return self.mean[idx].copy(), self.cov[np.ix_(idx, idx)].copy()

    def to_dict(self):
        return {'mean': self.mean.tolist(), 'cov': self.cov.tolist()}


@dataclass(frozen=True, eq=False)
class GaussianBelief(_Gaussian):
    """Gaussian belief over State5"""
    DIM: ClassVar[int] = STATE_DIM
    ANGLE_INDEX: ClassVar[Union[int, None]] = THETA

    @classmethod
    def from_state(cls, state: Union[State5, ArrayLike], cov=None) -> 'GaussianBelief':
        mean = state.as_array() if isinstance(state, State5) else np.asarray(state, dtype=float)
        return cls(mean, np.zeros((STATE_DIM, STATE_DIM)) if cov is None else cov)


@dataclass(frozen=True, eq=False)
class Gaussian2(_Gaussian):
    """Gaussian over the (v, omega) residual pair"""
    DIM: ClassVar[int] = 2

    @classmethod
    def zero(cls) -> 'Gaussian2':
        return cls(np.zeros(2), np.zeros((2, 2)))
