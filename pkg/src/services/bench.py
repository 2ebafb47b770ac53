"""
Benchmark harness: moving-horizon error sweeps, ensemble weight traces,
Monte-Carlo coverage checks, command-space error heatmaps and the full
synthetic-suite evaluation behind the `report` command.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.stats import binned_statistic_2d

from src.errors import NumericalError, ValidationError
from src.models.state import STATE_DIM, THETA, GaussianBelief, wrap_angle
from src.services.baselines import JacobianModel, fit_all, rollout_kinematic_batch
from src.services.data import (
    SyntheticTerrainSpec, TerrainDataset, command_script, split_dataset, synth_generate,
)
from src.services.dynamics import DynamicParams, identification_log, identify_params, step_array
from src.services.ensemble import (
    EnsembleGp, EnsembleWeights, TerrainGpBank, history_records, weights_frame_rows,
)
from src.services.gpr import build_residual_dataset, train_terrain_gp
from src.services.propagation import (
    SigmaConfig, coverage_fraction, monte_carlo_rollout, propagate_horizon, propagate_linear,
)

logger = logging.getLogger(__name__)

MIN_HEADING_CHANGE = 0.05
MIN_DISPLACEMENT = 0.05
COVERAGE_TOLERANCE = 1e-9

# Published asphalt figures from the field dataset, kept alongside synthetic results for comparison only
REFERENCE_TARGETS = {
    'asphalt': {
        'gp': {'omega_mae': 0.02, 'angular_pct': 5.7},
        'EDD5': {'omega_mae': 0.19, 'angular_pct': 17.6},
    },
}


class Predictor(Protocol):
    name: str

    def rollout(self, x0: np.ndarray, controls: np.ndarray, dt: float,
                starts: Optional[np.ndarray] = None) -> np.ndarray:
        """Predicted states (B, N+1, 5) for starts x0 (B, 5) under controls (B, N, 2)"""
        ...


def _residual_means(source, z: np.ndarray) -> np.ndarray:
    mean_batch = getattr(source, 'mean_batch', None)
    if mean_batch is not None:
        return mean_batch(z)
    return source.residual_batch(z)[0]


class DynamicPredictor:
    """Nominal dynamics plus the mean of an optional residual source"""

    def __init__(self, params: DynamicParams, source=None, name: str = 'nominal', method: str = 'rk4'):
        self.params = params
        self.source = source
        self.name = name
        self.method = method

    def _residual(self, x: np.ndarray, u: np.ndarray, starts) -> np.ndarray:
        return _residual_means(self.source, np.column_stack([x[:, 3:], u]))

    def rollout(self, x0, controls, dt, starts=None):
        x = np.array(x0, dtype=float)
        out = np.empty((x.shape[0], controls.shape[1] + 1, STATE_DIM))
        out[:, 0] = x
        for step in range(controls.shape[1]):
            u = controls[:, step]
            residual = self._residual(x, u, starts) if self.source is not None else None
            x = step_array(x, u, self.params, dt, method=self.method)
            if residual is not None:
                x[:, 3:] += residual
            out[:, step + 1] = x
        return out


class EnsemblePredictor(DynamicPredictor):
    """
    Ensemble residual with causal per-start weights: the weights used from
    start index k were solved from records that end at or before k.
    """

    def __init__(self, bank: TerrainGpBank, params: DynamicParams, dt: float, k: int = 10,
                 alpha: float = 1e-3, name: str = 'ensemble', method: str = 'rk4',
                 tol: float = 1e-8, max_iters: int = 10000):
        super().__init__(params, source=bank, name=name, method=method)
        self.bank = bank
        self.dt = dt
        self.k = k
        self.alpha = alpha
        self.tol = tol
        self.max_iters = max_iters
        self.start_weights: Optional[np.ndarray] = None
        self.trace: List[EnsembleWeights] = []

    def prepare(self, dataset: TerrainDataset) -> List[EnsembleWeights]:
        ensemble = EnsembleGp(self.bank, self.params, self.dt, k=self.k, alpha=self.alpha,
                              method=self.method, tol=self.tol, max_iters=self.max_iters)
        trace = [ensemble.weights]
        for record in history_records(dataset.states(), dataset.controls()):
            trace.append(ensemble.observe(record))
        self.trace = trace
        self.start_weights = np.array([w.w for w in trace])
        return trace

    def _residual(self, x, u, starts):
        if self.start_weights is None or starts is None:
            raise ValidationError('ensemble predictor needs prepare(dataset) and start indices')
        weights = self.start_weights[starts]
        z = np.column_stack([x[:, 3:], u])
        residual = np.zeros((x.shape[0], 2))
        for i, entry in enumerate(self.bank):
            residual += weights[:, i:i + 1] * entry.mean_batch(z)
        return residual


class SimulatorPredictor:
    """The generating simulator itself, noise free"""

    def __init__(self, spec: SyntheticTerrainSpec, substeps: int = 100, name: str = 'simulator'):
        self.spec = spec
        self.substeps = substeps
        self.name = name

    def rollout(self, x0, controls, dt, starts=None):
        x = np.array(x0, dtype=float)
        disturbance = self.spec.disturbance_batch if self.spec.disturbance else None
        out = np.empty((x.shape[0], controls.shape[1] + 1, STATE_DIM))
        out[:, 0] = x
        for step in range(controls.shape[1]):
            x = step_array(x, controls[:, step], self.spec.params, dt, substeps=self.substeps,
                           disturbance=disturbance)
            out[:, step + 1] = x
        return out


class KinematicPredictor:
    """Jacobian baseline; velocities are the predicted body rates of the previous command"""

    def __init__(self, model: JacobianModel, name: Optional[str] = None):
        self.model = model
        self.name = name or model.variant

    def rollout(self, x0, controls, dt, starts=None):
        x0 = np.asarray(x0, dtype=float)
        rollout = rollout_kinematic_batch(self.model, x0[:, :3], controls, dt)
        out = np.empty((x0.shape[0], controls.shape[1] + 1, STATE_DIM))
        out[:, :, :3] = rollout.poses
        out[:, 0, 3:] = x0[:, 3:]
        out[:, 1:, 3] = rollout.rates[:, :, 0]
        out[:, 1:, 4] = rollout.rates[:, :, 2]
        return out


def _none_if_nan(value):
    return None if value is None or (isinstance(value, float) and math.isnan(value)) else value


@dataclass(frozen=True)
class ErrorReport:
    terrain: str
    model: str
    angular_pct: float
    linear_pct: float
    omega_mae: float
    v_mae: float
    count: int
    angular_excluded: int = 0
    linear_excluded: int = 0

    def to_dict(self):
        return {
            'terrain': self.terrain,
            'model': self.model,
            'angular_pct': _none_if_nan(self.angular_pct),
            'linear_pct': _none_if_nan(self.linear_pct),
            'omega_mae': self.omega_mae,
            'v_mae': self.v_mae,
            'count': self.count,
            'angular_excluded': self.angular_excluded,
            'linear_excluded': self.linear_excluded,
        }


def horizon_steps(horizon_s: float, dt: float) -> int:
    if dt <= 0 or horizon_s <= 0:
        raise ValidationError(f'horizon and dt must be positive, got {horizon_s}, {dt}')
    steps = int(round(horizon_s / dt))
    if steps < 1 or abs(steps * dt - horizon_s) > 1e-6 * max(horizon_s, 1.0):
        raise ValidationError(f'horizon {horizon_s} s is not an integer multiple of dt={dt}')
    return steps


def _windows(dataset: TerrainDataset, steps: int):
    states = dataset.states()
    controls = dataset.controls()
    if len(states) < steps + 1:
        raise ValidationError(f'dataset {dataset.label!r} ({len(states)} records) is shorter than one horizon')
    starts = np.arange(len(states) - steps)
    window = starts[:, None] + np.arange(steps)[None, :]
    return states, controls, starts, controls[window]


def window_errors(predictor: Predictor, dataset: TerrainDataset, horizon_s: float = 1.0,
                  dt: Optional[float] = None) -> pd.DataFrame:
    """
    Roll the predictor over every start index under the logged commands and
    compare the terminal state against ground truth, one row per start.
    """
    dt = dataset.dt if dt is None else dt
    steps = horizon_steps(horizon_s, dt)
    states, _, starts, window_controls = _windows(dataset, steps)
    predicted = predictor.rollout(states[starts], window_controls, dt, starts=starts)[:, -1]
    truth = states[starts + steps]

    heading_steps = wrap_angle(np.diff(states[:, THETA]))
    cumulative = np.concatenate([[0.0], np.cumsum(heading_steps)])
    return pd.DataFrame({
        'start': starts,
        'omega_error': np.abs(predicted[:, 4] - truth[:, 4]),
        'v_error': np.abs(predicted[:, 3] - truth[:, 3]),
        'heading_error': np.abs(wrap_angle(predicted[:, THETA] - truth[:, THETA])),
        'heading_change': np.abs(cumulative[starts + steps] - cumulative[starts]),
        'position_error': np.linalg.norm(predicted[:, :2] - truth[:, :2], axis=1),
        'displacement': np.linalg.norm(truth[:, :2] - states[starts, :2], axis=1),
    })


def _normalized_pct(errors: pd.Series, scale: pd.Series, ok: pd.Series) -> float:
    if not ok.any():
        return float('nan')
    return float(np.mean(errors[ok] / scale[ok]) * 100.0)


def sweep_errors(predictor: Predictor, dataset: TerrainDataset, horizon_s: float = 1.0,
                 dt: Optional[float] = None) -> ErrorReport:
    """Aggregate moving-horizon errors over every start index of the dataset"""
    frame = window_errors(predictor, dataset, horizon_s, dt)
    angular_ok = frame['heading_change'] >= MIN_HEADING_CHANGE
    linear_ok = frame['displacement'] >= MIN_DISPLACEMENT
    omega_mae = float(frame['omega_error'].mean())
    v_mae = float(frame['v_error'].mean())
    angular_pct = _normalized_pct(frame['heading_error'], frame['heading_change'], angular_ok)
    linear_pct = _normalized_pct(frame['position_error'], frame['displacement'], linear_ok)

    report = ErrorReport(
        terrain=dataset.label, model=predictor.name, angular_pct=angular_pct, linear_pct=linear_pct,
        omega_mae=omega_mae, v_mae=v_mae, count=int(len(frame)),
        angular_excluded=int((~angular_ok).sum()), linear_excluded=int((~linear_ok).sum()),
    )
    logger.info('Sweep %s on %s: omega MAE %.4f, v MAE %.4f, angular %.2f%%, linear %.2f%%',
                report.model, report.terrain, omega_mae, v_mae, angular_pct, linear_pct)
    return report


@dataclass(frozen=True, eq=False)
class HeatmapGrid:
    v_edges: np.ndarray
    omega_edges: np.ndarray
    mean_error: np.ndarray
    counts: np.ndarray

    @property
    def empty(self) -> np.ndarray:
        return self.counts == 0

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for i in range(len(self.v_edges) - 1):
            for j in range(len(self.omega_edges) - 1):
                rows.append({
                    'v_ref_lo': float(self.v_edges[i]), 'v_ref_hi': float(self.v_edges[i + 1]),
                    'omega_ref_lo': float(self.omega_edges[j]), 'omega_ref_hi': float(self.omega_edges[j + 1]),
                    'count': int(self.counts[i, j]),
                    'mean_abs_omega_error': float(self.mean_error[i, j]),
                    'empty': bool(self.counts[i, j] == 0),
                })
        return pd.DataFrame(rows)

    def max_error_bin(self) -> Tuple[int, int]:
        return np.unravel_index(np.nanargmax(self.mean_error), self.mean_error.shape)


def run_heatmap(predictor: Predictor, dataset: TerrainDataset, bins: int = 8,
                dt: Optional[float] = None, value_range=None) -> HeatmapGrid:
    """One-step angular-velocity errors binned over the commanded (v_ref, omega_ref) plane"""
    dt = dataset.dt if dt is None else dt
    states, controls, starts, window_controls = _windows(dataset, 1)
    predicted = predictor.rollout(states[starts], window_controls, dt, starts=starts)[:, -1]
    errors = np.abs(predicted[:, 4] - states[starts + 1, 4])
    commands = controls[starts]
    mean, v_edges, omega_edges, _ = binned_statistic_2d(
        commands[:, 0], commands[:, 1], errors, statistic='mean', bins=bins, range=value_range)
    counts, _, _, _ = binned_statistic_2d(
        commands[:, 0], commands[:, 1], errors, statistic='count', bins=[v_edges, omega_edges])
    counts = counts.astype(int)
    mean = np.where(counts > 0, mean, np.nan)
    return HeatmapGrid(v_edges, omega_edges, mean, counts)


class WeightTrace(NamedTuple):
    trace: List[EnsembleWeights]
    labels: List[str]
    true_label: str
    steps_to_correct: Optional[int]
    steady_state_weight: Optional[float]

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(weights_frame_rows(self.trace, self.labels))
        frame.insert(0, 'terrain', self.true_label)
        return frame

    def summary(self):
        return {
            'steps_to_correct': self.steps_to_correct,
            'steady_state_weight': self.steady_state_weight,
            'final_weights': self.trace[-1].w.tolist(),
        }


def run_weight_trace(bank: TerrainGpBank, dataset: TerrainDataset, k: int, alpha: float,
                     params: DynamicParams, dt: Optional[float] = None, tol: float = 1e-8,
                     max_iters: int = 10000) -> WeightTrace:
    """Stream a terrain's records through the ensemble update from uniform weights"""
    dt = dataset.dt if dt is None else dt
    ensemble = EnsembleGp(bank, params, dt, k=k, alpha=alpha, tol=tol, max_iters=max_iters)
    trace = [ensemble.weights]
    for record in history_records(dataset.states(), dataset.controls()):
        trace.append(ensemble.observe(record))

    true_index = bank.index(dataset.label)
    if true_index is None:
        logger.warning('Terrain %r is not in the bank; convergence metrics are not available', dataset.label)
    return WeightTrace(trace, bank.labels, dataset.label, *_trace_metrics(trace, true_index))


class CoverageScenario(NamedTuple):
    belief0: GaussianBelief
    controls: np.ndarray


def default_scenarios(count: int, n_steps: int, seed: int = 0,
                      v_max: float = 2.0, omega_max: float = 4.0) -> List[CoverageScenario]:
    """Seeded initial beliefs and held random commands over one horizon"""
    rng = np.random.default_rng(seed)
    scenarios = []
    for _ in range(count):
        mean = np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi), rng.uniform(0.1, 0.4), rng.uniform(-0.5, 0.5)])
        std = np.array([0.02, 0.02, 0.02, 0.02, 0.05])
        command = np.array([rng.uniform(0.2, 0.8) * v_max, rng.uniform(-0.5, 0.5) * omega_max])
        scenarios.append(CoverageScenario(GaussianBelief(mean, np.diag(std ** 2)),
                                          np.tile(command, (n_steps, 1))))
    return scenarios


def _coverage(belief: GaussianBelief, samples: np.ndarray) -> float:
    try:
        return coverage_fraction(belief, samples)
    except NumericalError:
        # Degenerate ellipse: only the mean itself is covered
        offsets = np.linalg.norm(samples[:, :2] - belief.mean[:2], axis=1)
        return float(np.mean(offsets <= COVERAGE_TOLERANCE * (1.0 + np.linalg.norm(belief.mean[:2]))))


def run_coverage(params: DynamicParams, source, scenario: CoverageScenario, dt: float, n_mc: int = 250,
                 seed: int = 0, config: SigmaConfig = SigmaConfig()) -> pd.DataFrame:
    """Per-step 3-sigma (X, Y) coverage of Monte-Carlo samples by both propagation methods"""
    sigma = propagate_horizon(scenario.belief0, scenario.controls, source, params, dt, config)
    linear = propagate_linear(scenario.belief0, scenario.controls, source, params, dt)
    samples = monte_carlo_rollout(scenario.belief0, scenario.controls, source, params, dt,
                                  n_samples=n_mc, seed=seed)
    rows = []
    for step in range(len(sigma)):
        rows.append({
            'step': step,
            'sigma_coverage': _coverage(sigma[step], samples.at(step)),
            'linear_coverage': _coverage(linear[step], samples.at(step)),
        })
    return pd.DataFrame(rows)


@dataclass
class BenchmarkResult:
    report: Dict
    table1: pd.DataFrame
    table2: pd.DataFrame
    weights: pd.DataFrame
    coverage: pd.DataFrame
    heatmap: pd.DataFrame
    params: DynamicParams
    bank: TerrainGpBank
    baselines: Dict[str, Dict[str, JacobianModel]] = field(default_factory=dict)
    datasets: Dict[str, TerrainDataset] = field(default_factory=dict)


def run_benchmark(config: Mapping, specs: Sequence[SyntheticTerrainSpec], seed: int = 0,
                  n_scenarios: int = 3) -> BenchmarkResult:
    """
    The whole synthetic evaluation: synthesize each terrain, identify the
    nominal parameters on the first terrain, train per-terrain GPs and
    kinematic baselines on chronological train splits, then sweep, trace,
    cover and bin on the test splits.
    """
    dt = float(config['DT'])
    horizon = float(config['HORIZON_S'])
    steps = horizon_steps(horizon, dt)
    v_max = float(config['V_REF_MAX'])
    omega_max = float(config['OMEGA_REF_MAX'])
    r, b = float(config['WHEEL_RADIUS']), float(config['TRACK_WIDTH'])

    datasets, train, test = {}, {}, {}
    for index, spec in enumerate(specs):
        script = command_script(config['SYNTH_SCRIPT'], float(config['SYNTH_DURATION_S']), dt,
                                seed=seed + index, v_max=v_max, omega_max=omega_max)
        run = synth_generate(spec, script, dt, seed=spec.seed + seed)
        datasets[spec.label] = run.dataset
        train[spec.label], test[spec.label] = split_dataset(run.dataset)

    reference = specs[0].label
    reference_train = train[reference]
    log = identification_log(reference_train.states()[:, 3:], reference_train.controls(), dt)
    identification = identify_params(log, filter_beta=float(config['IDENT_FILTER_BETA']),
                                     a=float(config['COM_OFFSET']), method=config['INTEGRATOR'])
    params = identification.params

    models = []
    for index, spec in enumerate(specs):
        residuals = build_residual_dataset(train[spec.label], params, dt, method=config['INTEGRATOR'])
        models.append(train_terrain_gp(residuals, spec.label, k_clusters=int(config['GP_K_CLUSTERS']),
                                       max_iters=int(config['GP_MAX_ITERS']),
                                       restarts=int(config['GP_RESTARTS']), seed=seed + index))
    bank = TerrainGpBank(tuple(models))
    baselines = {label: fit_all(train[label], r, b) for label in train}

    errors, weight_frames, coverage_frames, heatmap_frames = [], [], [], []
    terrains = {}
    for index, spec in enumerate(specs):
        label = spec.label
        data = test[label]
        ensemble = EnsemblePredictor(bank, params, dt, k=int(config['ENSEMBLE_K']),
                                     alpha=float(config['ENSEMBLE_ALPHA']), method=config['INTEGRATOR'],
                                     tol=float(config['SOLVER_TOL']), max_iters=int(config['SOLVER_MAX_ITERS']))
        ensemble.prepare(data)
        predictors = [
            DynamicPredictor(params, None, 'nominal', config['INTEGRATOR']),
            DynamicPredictor(params, bank.entries[index], 'gp', config['INTEGRATOR']),
            ensemble,
        ] + [KinematicPredictor(model) for model in baselines[label].values()]
        terrain_errors = [sweep_errors(p, data, horizon, dt) for p in predictors]
        errors.extend(terrain_errors)

        trace = WeightTrace(ensemble.trace, bank.labels, label, *_trace_metrics(ensemble.trace, bank.index(label)))
        weight_frames.append(trace.to_frame())

        scenario_rows = []
        for number, scenario in enumerate(default_scenarios(n_scenarios, steps, seed + index, v_max, omega_max)):
            frame = run_coverage(params, bank.entries[index], scenario, dt, n_mc=int(config['N_MC']),
                                 seed=seed + number, config=SigmaConfig(float(config['SIGMA_LAMBDA'])))
            frame.insert(0, 'scenario', number)
            frame.insert(0, 'terrain', label)
            scenario_rows.append(frame)
        coverage = pd.concat(scenario_rows, ignore_index=True)
        coverage_frames.append(coverage)

        heatmap_models = [p for p in predictors if p.name in ('gp', 'EDD5')]
        for predictor in heatmap_models:
            grid = run_heatmap(predictor, data, bins=int(config['HEATMAP_BINS']), dt=dt)
            frame = grid.to_frame()
            frame.insert(0, 'model', predictor.name)
            frame.insert(0, 'terrain', label)
            heatmap_frames.append(frame)

        terrains[label] = {
            'models': {e.model: e.to_dict() for e in terrain_errors},
            'weights': trace.summary(),
            'coverage': {
                'min_sigma': float(coverage['sigma_coverage'].min()),
                'min_linear': float(coverage['linear_coverage'].min()),
            },
            'baselines': {variant: model.to_dict() for variant, model in baselines[label].items()},
        }

    table = pd.DataFrame([e.to_dict() for e in errors])
    report = {
        'seed': seed,
        'dt': dt,
        'horizon_s': horizon,
        'identification': {**identification.to_dict(), 'terrain': reference},
        'terrains': terrains,
        'reference_targets': REFERENCE_TARGETS,
    }
    return BenchmarkResult(
        report=report,
        table1=table[['terrain', 'model', 'angular_pct', 'linear_pct', 'count']],
        table2=table[['terrain', 'model', 'omega_mae', 'v_mae', 'count']],
        weights=pd.concat(weight_frames, ignore_index=True),
        coverage=pd.concat(coverage_frames, ignore_index=True),
        heatmap=pd.concat(heatmap_frames, ignore_index=True),
        params=params,
        bank=bank,
        baselines=baselines,
        datasets=datasets,
    )


def _trace_metrics(trace: Sequence[EnsembleWeights], true_index: Optional[int]):
    if true_index is None:
        return None, None
    correct = [w.argmax == true_index for w in trace]
    steps_to_correct = next((i for i, ok in enumerate(correct) if ok and i > 0), None)
    tail = trace[len(trace) // 2:]
    return steps_to_correct, float(np.mean([w.w[true_index] for w in tail]))
