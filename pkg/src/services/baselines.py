"""
Kinematic Jacobian baselines.

Body rates [v_x, v_y, omega] are a linear map J of the wheel speeds
[omega_l, omega_r]. The variants differ only in how J is parameterized:

    IDD   ideal differential drive, no free parameters
    EDD2  IDD with slip factors on the forward and yaw rows
    EDD5  free forward and yaw rows plus one shared lateral skew term
    FL    all six entries free
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, NamedTuple, Tuple

import numpy as np

from src.errors import InsufficientExcitationError, ValidationError
from src.models.state import State5, as_control_array, wrap_angle

logger = logging.getLogger(__name__)

VARIANTS = ('IDD', 'EDD2', 'EDD5', 'FL')
PARAM_COUNTS = {'IDD': 0, 'EDD2': 2, 'EDD5': 5, 'FL': 6}
MIN_FIT_SAMPLES = 50


def _check_geometry(r: float, b: float):
    if not (r > 0 and b > 0):
        raise ValidationError(f'wheel radius and track width must be positive, got r={r}, b={b}')


def ideal_jacobian(r: float, b: float) -> np.ndarray:
    _check_geometry(r, b)
    return np.array([
        [r / 2.0, r / 2.0],
        [0.0, 0.0],
        [-r / b, r / b],
    ])


def jacobian_from_params(variant: str, params, r: float, b: float) -> np.ndarray:
    params = tuple(float(p) for p in params)
    if variant not in VARIANTS:
        raise ValidationError(f'unknown kinematic variant {variant!r}, expected one of {VARIANTS}')
    if len(params) != PARAM_COUNTS[variant]:
        raise ValidationError(f'{variant} takes {PARAM_COUNTS[variant]} parameters, got {len(params)}')
    ideal = ideal_jacobian(r, b)
    if variant == 'IDD':
        return ideal
    if variant == 'EDD2':
        alpha_v, alpha_omega = params
        return ideal * np.array([[alpha_v], [0.0], [alpha_omega]])
    if variant == 'EDD5':
        j11, j12, j31, j32, skew = params
        return np.array([[j11, j12], [-skew, skew], [j31, j32]])
    return np.array(params).reshape(3, 2)


@dataclass(frozen=True, eq=False)
class JacobianModel:
    variant: str
    params: Tuple[float, ...]
    wheel_radius: float = 0.098
    track_width: float = 0.37
    rss: float = float('nan')
    n_samples: int = 0
    J: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, 'params', tuple(float(p) for p in self.params))
        jacobian = jacobian_from_params(self.variant, self.params, self.wheel_radius, self.track_width)
        jacobian.flags.writeable = False
        object.__setattr__(self, 'J', jacobian)

    @classmethod
    def ideal(cls, r: float = 0.098, b: float = 0.37) -> 'JacobianModel':
        return cls('IDD', (), r, b)

    def to_dict(self):
        return {
            'variant': self.variant,
            'params': list(self.params),
            'wheel_radius': self.wheel_radius,
            'track_width': self.track_width,
            'J': self.J.tolist(),
            'rss': self.rss,
            'n_samples': self.n_samples,
        }

    @classmethod
    def from_dict(cls, data) -> 'JacobianModel':
        return cls(data['variant'], tuple(data['params']), float(data['wheel_radius']),
                   float(data['track_width']), float(data.get('rss', float('nan'))), int(data.get('n_samples', 0)))


def wheels_from_body(u, r: float, b: float) -> Tuple[float, float]:
    _check_geometry(r, b)
    v_ref, omega_ref = as_control_array(u)
    return (v_ref - omega_ref * b / 2.0) / r, (v_ref + omega_ref * b / 2.0) / r


def wheels_from_body_array(controls, r: float, b: float) -> np.ndarray:
    """(..., 2) body commands to (..., 2) wheel speeds [omega_l, omega_r]"""
    _check_geometry(r, b)
    controls = np.asarray(controls, dtype=float)
    v_ref, omega_ref = controls[..., 0], controls[..., 1]
    return np.stack([(v_ref - omega_ref * b / 2.0) / r, (v_ref + omega_ref * b / 2.0) / r], axis=-1)


def predict_rates(model: JacobianModel, omega_l, omega_r) -> np.ndarray:
    """[v_x, v_y, omega] (or rows of them for array inputs)"""
    wheels = np.stack([np.asarray(omega_l, dtype=float), np.asarray(omega_r, dtype=float)], axis=-1)
    return wheels @ model.J.T


def _lstsq(design: np.ndarray, target: np.ndarray, what: str) -> np.ndarray:
    design = np.atleast_2d(design.T).T
    if np.linalg.matrix_rank(design) < design.shape[1]:
        raise InsufficientExcitationError(f'insufficient excitation: {what} regressors are rank deficient')
    solution, *_ = np.linalg.lstsq(design, target, rcond=None)
    return solution


def fit_jacobian(variant: str, dataset, r: float = 0.098, b: float = 0.37) -> JacobianModel:
    """Ordinary least squares on the variant's free entries over [v_x, v_y, omega]"""
    if variant not in VARIANTS:
        raise ValidationError(f'unknown kinematic variant {variant!r}, expected one of {VARIANTS}')
    if len(dataset) == 0:
        raise ValidationError('cannot fit a kinematic model to an empty dataset')
    if not dataset.has_velocities:
        raise ValidationError('kinematic fits need derived velocities; run derive_velocities first')
    if len(dataset) < MIN_FIT_SAMPLES:
        raise ValidationError(f'kinematic fits need at least {MIN_FIT_SAMPLES} samples, got {len(dataset)}')
    wheels = wheels_from_body_array(dataset.controls(), r, b)
    rates = dataset.body_rates()
    w_l, w_r = wheels[:, 0], wheels[:, 1]

    if variant == 'IDD':
        params = ()
    elif variant == 'EDD2':
        ideal = ideal_jacobian(r, b)
        alpha_v = _lstsq(wheels @ ideal[0], rates[:, 0], 'forward slip')[0]
        alpha_omega = _lstsq(wheels @ ideal[2], rates[:, 2], 'yaw slip')[0]
        params = (alpha_v, alpha_omega)
    elif variant == 'EDD5':
        j11, j12 = _lstsq(wheels, rates[:, 0], 'forward row')
        j31, j32 = _lstsq(wheels, rates[:, 2], 'yaw row')
        skew = _lstsq(w_r - w_l, rates[:, 1], 'lateral skew')[0]
        params = (j11, j12, j31, j32, skew)
    else:
        rows = [_lstsq(wheels, rates[:, i], f'row {i + 1}') for i in range(3)]
        params = tuple(np.concatenate(rows))

    jacobian = jacobian_from_params(variant, params, r, b)
    residual = rates - wheels @ jacobian.T
    rss = float(np.sum(residual ** 2))
    logger.info('Fitted %s on %s: rss %.4g over %d samples', variant, getattr(dataset, 'label', ''), rss, len(dataset))
    return JacobianModel(variant, params, r, b, rss, len(dataset))


def fit_all(dataset, r: float = 0.098, b: float = 0.37) -> Dict[str, JacobianModel]:
    return {variant: fit_jacobian(variant, dataset, r, b) for variant in VARIANTS}


class KinematicRollout(NamedTuple):
    poses: np.ndarray
    rates: np.ndarray


def integrate_poses(poses: np.ndarray, rates: np.ndarray, dt: float) -> np.ndarray:
    """Advance rows of [X, Y, theta] by body rates [v_x, v_y, omega] using the midpoint heading"""
    theta_mid = poses[..., 2] + 0.5 * dt * rates[..., 2]
    cos_t, sin_t = np.cos(theta_mid), np.sin(theta_mid)
    advanced = np.empty_like(poses)
    advanced[..., 0] = poses[..., 0] + dt * (rates[..., 0] * cos_t - rates[..., 1] * sin_t)
    advanced[..., 1] = poses[..., 1] + dt * (rates[..., 0] * sin_t + rates[..., 1] * cos_t)
    advanced[..., 2] = wrap_angle(poses[..., 2] + dt * rates[..., 2])
    return advanced


def rollout_kinematic_batch(model: JacobianModel, poses0, controls, dt: float) -> KinematicRollout:
    """Poses (B, N+1, 3) and body rates (B, N, 3) for starts (B, 3) under controls (B, N, 2)"""
    if dt <= 0:
        raise ValidationError(f'dt must be positive, got {dt}')
    poses0 = np.atleast_2d(np.asarray(poses0, dtype=float))
    controls = np.asarray(controls, dtype=float)
    wheels = wheels_from_body_array(controls, model.wheel_radius, model.track_width)
    rates = wheels @ model.J.T
    poses = np.empty((poses0.shape[0], controls.shape[1] + 1, 3))
    poses[:, 0] = poses0
    for step in range(controls.shape[1]):
        poses[:, step + 1] = integrate_poses(poses[:, step], rates[:, step], dt)
    return KinematicRollout(poses, rates)


def rollout_kinematic(model: JacobianModel, x0: State5, u_seq, dt: float) -> KinematicRollout:
    controls = np.array([as_control_array(u) for u in u_seq], dtype=float).reshape(1, -1, 2)
    start = np.array([[x0.X, x0.Y, x0.theta]])
    rollout = rollout_kinematic_batch(model, start, controls, dt)
    return KinematicRollout(rollout.poses[0], rollout.rates[0])
