"""
Terrain datasets: CSV ingestion, ground-truth velocity derivation, command
scripts and the synthetic multi-terrain simulator.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.errors import ValidationError
from src.models.state import STATE_DIM, THETA, Control, State5, as_control_array
from src.services.dynamics import DynamicParams, lowpass_array, step_array

logger = logging.getLogger(__name__)

REQUIRED_COLUMNS = ('t', 'x', 'y', 'theta', 'v_ref', 'omega_ref')
VELOCITY_COLUMNS = ('v', 'omega')
LATERAL_COLUMN = 'v_lat'
SCRIPTS = ('pseudo_random', 'lawnmower', 'figure_eight', 'speed_sweep')
SYNTH_SUBSTEPS = 100
UNIFORM_DT_TOLERANCE = 0.1
SUITES_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.dirname(__file__))), 'fixtures', 'suites')


@dataclass(frozen=True, eq=False)
class TerrainDataset:
    """Time-indexed poses and commands; velocity columns appear after derivation"""
    label: str
    dt: float
    frame: pd.DataFrame

    def __len__(self):
        return len(self.frame)

    @property
    def has_velocities(self) -> bool:
        return all(c in self.frame and not self.frame[c].isna().any() for c in VELOCITY_COLUMNS)

    def times(self) -> np.ndarray:
        return self.frame['t'].to_numpy(dtype=float)

    def poses(self) -> np.ndarray:
        return self.frame[['x', 'y', 'theta']].to_numpy(dtype=float)

    def controls(self) -> np.ndarray:
        return self.frame[['v_ref', 'omega_ref']].to_numpy(dtype=float)

    def states(self) -> np.ndarray:
        if not self.has_velocities:
            raise ValidationError(f'dataset {self.label!r} has no velocities; run derive_velocities first')
        return self.frame[['x', 'y', 'theta', 'v', 'omega']].to_numpy(dtype=float)

    def body_rates(self) -> np.ndarray:
        """[v_x, v_y, omega] rows; a missing lateral column reads as zero"""
        states = self.states()
        if LATERAL_COLUMN in self.frame and not self.frame[LATERAL_COLUMN].isna().any():
            lateral = self.frame[LATERAL_COLUMN].to_numpy(dtype=float)
        else:
            lateral = np.zeros(len(self))
        return np.column_stack([states[:, 3], lateral, states[:, 4]])

    def state(self, index: int) -> State5:
        return State5.from_array(self.states()[index])

    def with_columns(self, **columns) -> 'TerrainDataset':
        frame = self.frame.copy()
        for name, values in columns.items():
            frame[name] = values
        return TerrainDataset(self.label, self.dt, frame)

    @classmethod
    def from_arrays(cls, label: str, t, states, controls, v_lat=None) -> 'TerrainDataset':
        states = np.asarray(states, dtype=float)
        controls = np.asarray(controls, dtype=float)
        frame = pd.DataFrame({
            't': np.asarray(t, dtype=float),
            'x': states[:, 0], 'y': states[:, 1], 'theta': states[:, 2],
            'v_ref': controls[:, 0], 'omega_ref': controls[:, 1],
        })
        if states.shape[1] == STATE_DIM:
            frame['v'] = states[:, 3]
            frame['omega'] = states[:, 4]
            frame[LATERAL_COLUMN] = np.zeros(len(frame)) if v_lat is None else np.asarray(v_lat, dtype=float)
        _check_times(frame['t'].to_numpy())
        return cls(label, _median_dt(frame['t'].to_numpy()), frame)


def _median_dt(times: np.ndarray) -> float:
    return float(np.median(np.diff(times))) if len(times) > 1 else float('nan')


def _check_times(times: np.ndarray):
    gaps = np.diff(times)
    bad = np.flatnonzero(~(gaps > 0))
    if bad.size:
        row = int(bad[0]) + 1
        raise ValidationError(f'timestamps must be strictly increasing: row {row + 1} has t={times[row]!r} '
                              f'after t={times[row - 1]!r}')


def _check_commands(path: str, controls: np.ndarray, v_max: float, omega_max: float):
    for row, (v_ref, omega_ref) in enumerate(controls, start=1):
        if not Control(float(v_ref), float(omega_ref)).within_bounds(v_max, omega_max):
            raise ValidationError(f'{path}: command ({v_ref}, {omega_ref}) at row {row} is outside '
                                  f'|v_ref| <= {v_max}, |omega_ref| <= {omega_max}')


def load_dataset(path: str, column_map: Optional[Mapping[str, str]] = None,
                 label: Optional[str] = None,
                 command_bounds: Optional[Tuple[float, float]] = None) -> TerrainDataset:
    """
    Read a CSV with a named header. column_map renames external column
    names to t, x, y, theta, v_ref, omega_ref (and optionally v, omega, v_lat).
    command_bounds = (v_max, omega_max) rejects commands outside the envelope.
    Row numbers in errors count data rows from 1.
    """
    if not os.path.isfile(path):
        raise ValidationError(f'dataset file not found: {path}')
    try:
        frame = pd.read_csv(path, float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError(f'cannot parse {path}: {exc}') from exc
    if column_map:
        frame = frame.rename(columns=dict(column_map))
    missing = [c for c in REQUIRED_COLUMNS if c not in frame]
    if missing:
        raise ValidationError(f'{path} is missing columns: {", ".join(missing)}')
    numeric_columns = [c for c in REQUIRED_COLUMNS + VELOCITY_COLUMNS + (LATERAL_COLUMN,) if c in frame]
    for column in numeric_columns:
        values = pd.to_numeric(frame[column], errors='coerce')
        bad = values.isna() & frame[column].notna()
        if column in REQUIRED_COLUMNS:
            bad |= values.isna()
        if bad.any():
            row = int(np.flatnonzero(bad.to_numpy())[0]) + 1
            raise ValidationError(f'{path}: unparseable value in column {column!r} at row {row}')
        frame[column] = values.astype(float)
    _check_times(frame['t'].to_numpy())
    if command_bounds is not None:
        _check_commands(path, frame[['v_ref', 'omega_ref']].to_numpy(), *command_bounds)
    label = label or os.path.splitext(os.path.basename(path))[0]
    logger.debug('Loaded %d records from %s', len(frame), path)
    return TerrainDataset(label, _median_dt(frame['t'].to_numpy()), frame.reset_index(drop=True))


def save_dataset(dataset: TerrainDataset, path: str):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    dataset.frame.to_csv(path, index=False, float_format='%.17g')


def _repeat_first(values: np.ndarray) -> np.ndarray:
    return np.concatenate([values[:1], values])


def derive_velocities(dataset: TerrainDataset, filter_beta: float = 0.5) -> TerrainDataset:
    """
    Low-pass the poses, backward-difference them and project the planar
    velocity onto the interval-midpoint heading. Row 0 copies row 1.
    """
    if len(dataset) < 2:
        raise ValidationError(f'velocity derivation needs at least 2 records, got {len(dataset)}')
    times = dataset.times()
    gaps = np.diff(times)
    dt = float(np.median(gaps))
    if np.max(np.abs(gaps - dt)) > UNIFORM_DT_TOLERANCE * dt:
        raise ValidationError(f'velocity derivation needs a uniform dt within 10%; gaps span '
                              f'{gaps.min():.4g}..{gaps.max():.4g} s')
    poses = dataset.poses()
    poses[:, THETA] = np.unwrap(poses[:, THETA])
    filtered = lowpass_array(poses, filter_beta, axis=0)
    rates = np.diff(filtered, axis=0) / gaps[:, None]
    heading = 0.5 * (filtered[1:, THETA] + filtered[:-1, THETA])
    cos_h, sin_h = np.cos(heading), np.sin(heading)
    v = rates[:, 0] * cos_h + rates[:, 1] * sin_h
    v_lat = -rates[:, 0] * sin_h + rates[:, 1] * cos_h
    omega = rates[:, 2]
    return dataset.with_columns(v=_repeat_first(v), omega=_repeat_first(omega), v_lat=_repeat_first(v_lat))


def _hold(values: np.ndarray, hold: int, n: int) -> np.ndarray:
    return np.repeat(values, hold, axis=0)[:n]


def command_script(name: str, duration: float, dt: float, seed: int = 0,
                   v_max: float = 2.0, omega_max: float = 4.0) -> np.ndarray:
    """Rows (v_ref, omega_ref) held over each dt"""
    if name not in SCRIPTS:
        raise ValidationError(f'unknown command script {name!r}, expected one of {SCRIPTS}')
    if duration <= 0 or dt <= 0:
        raise ValidationError(f'duration and dt must be positive, got {duration}, {dt}')
    n = max(int(round(duration / dt)), 1)
    t = np.arange(n) * dt

    if name == 'pseudo_random':
        rng = np.random.default_rng(seed)
        hold = max(int(round(1.0 / dt)), 1)
        n_targets = -(-n // hold)
        targets = np.column_stack([
            rng.uniform(-0.2 * v_max, v_max, n_targets),
            rng.uniform(-omega_max, omega_max, n_targets),
        ])
        return lowpass_array(_hold(targets, hold, n), 0.3, axis=0)

    if name == 'lawnmower':
        leg = max(int(round(5.0 / dt)), 1)
        turn = max(int(round(2.0 / dt)), 1)
        rows = []
        sign = 1.0
        while len(rows) < n:
            rows.extend([(0.6 * v_max, 0.0)] * leg)
            rows.extend([(0.3 * v_max, sign * 0.5 * omega_max)] * turn)
            sign = -sign
        return np.array(rows[:n], dtype=float)

    if name == 'figure_eight':
        period = duration / 4.0
        omega_ref = 0.6 * omega_max * np.sin(2.0 * np.pi * t / period)
        return np.column_stack([np.full(n, 0.5 * v_max), omega_ref])

    # speed_sweep: four 0 -> v_max ramps with a turn between consecutive ramps
    quarter = n / 4.0
    controls = np.zeros((n, 2))
    for k in range(n):
        segment = min(int(k // quarter), 3)
        phase = (k - segment * quarter) / quarter
        if phase < 0.8:
            controls[k] = (v_max * phase / 0.8, 0.0)
        else:
            controls[k] = (0.2 * v_max, (0.5 if segment % 2 == 0 else -0.5) * omega_max)
    return controls


# Disturbance features of (states (B, 5), controls (B, 2))
FEATURES: Dict[str, Callable[[np.ndarray, np.ndarray], np.ndarray]] = {
    'const': lambda s, u: np.ones(len(s)),
    'v': lambda s, u: s[:, 3],
    'omega': lambda s, u: s[:, 4],
    'v_omega': lambda s, u: s[:, 3] * s[:, 4],
    'omega_sq': lambda s, u: s[:, 4] ** 2,
    'v_ref': lambda s, u: u[:, 0],
    'omega_ref': lambda s, u: u[:, 1],
    'tanh_v_ref': lambda s, u: np.tanh(u[:, 0]),
    'tanh_omega_ref': lambda s, u: np.tanh(u[:, 1]),
}


@dataclass(frozen=True)
class SyntheticTerrainSpec:
    """
    Ground-truth terrain for the simulator. The disturbance is a linear
    combination of named smooth features per channel, e.g.
    {"v": {"v": -0.2}, "omega": {"omega": 0.8, "tanh_omega_ref": -0.6}}.
    """
    label: str
    params: DynamicParams
    disturbance: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    noise_std: Tuple[float, float] = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        for channel, terms in self.disturbance.items():
            if channel not in ('v', 'omega'):
                raise ValidationError(f'disturbance channel must be "v" or "omega", got {channel!r}')
            unknown = set(terms) - set(FEATURES)
            if unknown:
                raise ValidationError(f'unknown disturbance features: {sorted(unknown)}')
        if len(self.noise_std) != 2 or min(self.noise_std) < 0:
            raise ValidationError(f'noise_std must be two non-negative values, got {self.noise_std}')

    def disturbance_batch(self, states: np.ndarray, controls: np.ndarray) -> np.ndarray:
        result = np.zeros((states.shape[0], 2))
        for column, channel in enumerate(('v', 'omega')):
            for feature, coefficient in self.disturbance.get(channel, {}).items():
                result[:, column] += coefficient * FEATURES[feature](states, controls)
        return result

    def disturbance_fn(self, v: float, omega: float, v_ref: float, omega_ref: float) -> Tuple[float, float]:
        states = np.array([[0.0, 0.0, 0.0, v, omega]])
        d = self.disturbance_batch(states, np.array([[v_ref, omega_ref]]))[0]
        return float(d[0]), float(d[1])

    def to_dict(self):
        return {
            'label': self.label,
            'params': self.params.to_dict(),
            'disturbance': {k: dict(v) for k, v in self.disturbance.items()},
            'noise_std': list(self.noise_std),
            'seed': self.seed,
        }

    @classmethod
    def from_dict(cls, data) -> 'SyntheticTerrainSpec':
        try:
            return cls(
                label=data['label'],
                params=DynamicParams.from_dict(data['params']),
                disturbance={k: dict(v) for k, v in data.get('disturbance', {}).items()},
                noise_std=tuple(float(s) for s in data.get('noise_std', (0.0, 0.0))),
                seed=int(data.get('seed', 0)),
            )
        except KeyError as exc:
            raise ValidationError(f'terrain spec is missing {exc}') from exc


def load_suite(name_or_dir: str) -> List[SyntheticTerrainSpec]:
    """Terrain specs from a directory of JSON files, or a named suite under fixtures/suites"""
    directory = name_or_dir if os.path.isdir(name_or_dir) else os.path.join(SUITES_DIR, name_or_dir)
    if not os.path.isdir(directory):
        raise ValidationError(f'unknown terrain suite {name_or_dir!r}')
    specs = []
    for filename in sorted(os.listdir(directory)):
        if filename.endswith('.json'):
            with open(os.path.join(directory, filename)) as f:
                specs.append(SyntheticTerrainSpec.from_dict(json.load(f)))
    if not specs:
        raise ValidationError(f'terrain suite {name_or_dir!r} holds no specs')
    return specs


class SyntheticRun(NamedTuple):
    dataset: TerrainDataset
    hidden: pd.DataFrame


def synth_generate(spec: SyntheticTerrainSpec, command_script, dt: float, x0: Optional[State5] = None,
                   seed: Optional[int] = None, substeps: int = SYNTH_SUBSTEPS) -> SyntheticRun:
    """
    Simulate the disturbed dynamics at dt/substeps and record one sample per dt.

    The hidden log holds, per consecutive pair, the total residual against a
    single nominal RK4 step (g_v, g_omega, what the GP learns) and its
    noise-free disturbance part (d_v, d_omega).
    """
    controls = np.array([as_control_array(u) for u in command_script], dtype=float).reshape(-1, 2)
    if len(controls) == 0:
        raise ValidationError('command script is empty')
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    noise_std = np.asarray(spec.noise_std, dtype=float)
    disturbance = spec.disturbance_batch if spec.disturbance else None

    states = np.empty((len(controls), STATE_DIM))
    states[0] = np.zeros(STATE_DIM) if x0 is None else x0.as_array()
    hidden = np.empty((len(controls) - 1, 4))
    for k in range(len(controls) - 1):
        nominal = step_array(states[k], controls[k], spec.params, dt)
        true_next = step_array(states[k], controls[k], spec.params, dt, substeps=substeps, disturbance=disturbance)
        clean_residual = true_next[3:] - nominal[3:]
        true_next[3:] += noise_std * rng.standard_normal(2)
        hidden[k, :2] = true_next[3:] - nominal[3:]
        hidden[k, 2:] = clean_residual
        states[k + 1] = true_next

    times = np.arange(len(controls)) * dt
    v_lat = spec.params.a * states[:, 4]
    dataset = TerrainDataset.from_arrays(spec.label, times, states, controls, v_lat=v_lat)
    hidden_frame = pd.DataFrame(hidden, columns=['g_v', 'g_omega', 'd_v', 'd_omega'])
    hidden_frame.insert(0, 'step', np.arange(len(hidden)))
    return SyntheticRun(dataset, hidden_frame)


def split_dataset(dataset: TerrainDataset, train_fraction: float = 0.7) -> Tuple[TerrainDataset, TerrainDataset]:
    """Chronological train/test split"""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f'train_fraction must lie in (0, 1), got {train_fraction}')
    cut = int(round(len(dataset) * train_fraction))
    head = dataset.frame.iloc[:cut].reset_index(drop=True)
    tail = dataset.frame.iloc[cut:].reset_index(drop=True)
    return (TerrainDataset(dataset.label, dataset.dt, head), TerrainDataset(dataset.label, dataset.dt, tail))
