"""
Command-line harness.

    python -m src.cli synth --suite default --out runs/s1
    python -m src.cli identify --dataset runs/s1/asphalt/train.csv --out runs/id
    python -m src.cli train-gp --params runs/id/params.json --dataset runs/s1/grass/train.csv ...
    python -m src.cli sweep --model gp --params ... --bank ... --dataset runs/s1/grass/test.csv
    python -m src.cli report --suite default --out runs/report

Every command writes its outputs and a manifest.json into --out and records
the run in the registry. Exit codes: 0 success, 1 invalid input, 2 numerical
failure.
"""

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from importlib import metadata

# DON'T CHANGE THIS !!!
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pandas as pd
from flask import Flask

from src.config import config_hash, load_config
from src.errors import NumericalError, ValidationError
from src.models.run import init_registry, record_run
from src.services import model_store
from src.services.baselines import VARIANTS, JacobianModel, fit_jacobian
from src.services.bench import (
    DynamicPredictor, EnsemblePredictor, KinematicPredictor, default_scenarios, horizon_steps,
    run_benchmark, run_coverage, run_heatmap, run_weight_trace, sweep_errors,
)
from src.services.data import (
    SCRIPTS, command_script, derive_velocities, load_dataset, load_suite, save_dataset, split_dataset,
    synth_generate,
)
from src.services.dynamics import identification_log, identify_params
from src.services.ensemble import TerrainGpBank
from src.services.gpr import build_residual_dataset, train_terrain_gp
from src.services.propagation import SigmaConfig

logger = logging.getLogger('skidsteer')

DYNAMIC_MODELS = ('nominal', 'gp', 'ensemble')
MODEL_CHOICES = DYNAMIC_MODELS + VARIANTS
PACKAGES = ('numpy', 'scipy', 'scikit-learn', 'pandas', 'Flask', 'Flask-SQLAlchemy', 'SQLAlchemy')
GENERIC_FILENAMES = ('train', 'test', 'data')


class ArgumentParser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2"""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f'{self.prog}: error: {message}\n')


class RunContext:
    """Output directory, config and the bookkeeping a command accumulates"""

    def __init__(self, args, config):
        self.args = args
        self.config = config
        self.out_dir = args.out or os.path.join('runs', args.command)
        self.inputs = []
        self.models = []
        os.makedirs(self.out_dir, exist_ok=True)

    def path(self, filename):
        return os.path.join(self.out_dir, filename)

    def input(self, path):
        if path and os.path.isfile(path):
            with open(path, 'rb') as f:
                digest = hashlib.sha256(f.read()).hexdigest()
            self.inputs.append({'path': path, 'sha256': digest})
        return path

    def model(self, kind, terrain, payload):
        self.models.append((kind, terrain, payload))

    def write_json(self, filename, data):
        with open(self.path(filename), 'w') as f:
            json.dump(data, f, sort_keys=True, indent=2, default=str)
            f.write('\n')

    def write_csv(self, filename, frame):
        frame.to_csv(self.path(filename), index=False, float_format='%.10g')


def dataset_label(path):
    """File stem, or the parent directory for generic names like train.csv"""
    stem = os.path.splitext(os.path.basename(path))[0]
    if stem in GENERIC_FILENAMES:
        return os.path.basename(os.path.dirname(os.path.abspath(path)))
    return stem


def read_dataset(ctx, path, label=None, need_velocities=True):
    bounds = (float(ctx.config['V_REF_MAX']), float(ctx.config['OMEGA_REF_MAX']))
    dataset = load_dataset(ctx.input(path), label=label or dataset_label(path), command_bounds=bounds)
    if need_velocities and not dataset.has_velocities:
        logger.info('Deriving velocities for %s', path)
        dataset = derive_velocities(dataset, float(ctx.config['DERIVE_FILTER_BETA']))
    return dataset


def require(value, flag):
    if value is None:
        raise ValidationError(f'{flag} is required for this command')
    return value


def build_predictor(ctx, model, dataset, terrain=None):
    config = ctx.config
    args = ctx.args
    if model in VARIANTS:
        if args.baselines is None:
            if model != 'IDD':
                raise ValidationError(f'--baselines is required for model {model}')
            return KinematicPredictor(JacobianModel.ideal(float(config['WHEEL_RADIUS']),
                                                          float(config['TRACK_WIDTH'])))
        baselines = model_store.load_baselines(ctx.input(args.baselines))
        if model not in baselines:
            raise ValidationError(f'{args.baselines} holds no {model} model')
        return KinematicPredictor(baselines[model])

    params = model_store.load_params(ctx.input(require(args.params, '--params')))
    if model == 'nominal':
        return DynamicPredictor(params, None, 'nominal', config['INTEGRATOR'])
    bank = model_store.load_bank(ctx.input(require(args.bank, '--bank')))
    if model == 'gp':
        label = terrain or dataset.label
        index = bank.index(label)
        if index is None:
            raise ValidationError(f'terrain {label!r} is not in the bank {bank.labels}; pass --terrain')
        return DynamicPredictor(params, bank.entries[index], 'gp', config['INTEGRATOR'])
    predictor = EnsemblePredictor(bank, params, dataset.dt, k=int(config['ENSEMBLE_K']),
                                  alpha=float(config['ENSEMBLE_ALPHA']), method=config['INTEGRATOR'],
                                  tol=float(config['SOLVER_TOL']), max_iters=int(config['SOLVER_MAX_ITERS']))
    predictor.prepare(dataset)
    return predictor


def cmd_identify(ctx):
    args = ctx.args
    dataset = read_dataset(ctx, args.dataset, args.label)
    log = identification_log(dataset.states()[:, 3:], dataset.controls(), dataset.dt)
    result = identify_params(log, filter_beta=float(ctx.config['IDENT_FILTER_BETA']),
                             refine=not args.no_refine, a=float(ctx.config['COM_OFFSET']),
                             method=ctx.config['INTEGRATOR'])
    model_store.save_params(result.params, ctx.path('params.json'))
    ctx.model('params', dataset.label, model_store.params_to_payload(result.params))
    return {'identification': {**result.to_dict(), 'terrain': dataset.label}}


def cmd_train_gp(ctx):
    args = ctx.args
    config = ctx.config
    params = model_store.load_params(ctx.input(require(args.params, '--params')))
    entries, summary = [], {}
    for index, path in enumerate(args.dataset):
        dataset = read_dataset(ctx, path)
        residuals = build_residual_dataset(dataset, params, dataset.dt, method=config['INTEGRATOR'])
        entry = train_terrain_gp(residuals, dataset.label, k_clusters=int(config['GP_K_CLUSTERS']),
                                 max_iters=int(config['GP_MAX_ITERS']), restarts=int(config['GP_RESTARTS']),
                                 seed=int(config['SEED']) + index)
        entries.append(entry)
        summary[dataset.label] = {
            'samples': len(residuals),
            'skipped': residuals.skipped,
            'train_points': entry.gp_v.n_train,
            'hyperparams_v': entry.gp_v.hyper.to_dict(),
            'hyperparams_omega': entry.gp_omega.hyper.to_dict(),
        }
    bank = TerrainGpBank(tuple(entries))
    model_store.save_bank(bank, ctx.path('gp_bank.json'))
    ctx.model('gp_bank', None, model_store.bank_to_payload(bank))
    return {'terrains': summary}


def cmd_train_baseline(ctx):
    args = ctx.args
    config = ctx.config
    dataset = read_dataset(ctx, args.dataset, args.label)
    variants = args.variant or list(VARIANTS)
    models = {variant: fit_jacobian(variant, dataset, float(config['WHEEL_RADIUS']), float(config['TRACK_WIDTH']))
              for variant in variants}
    model_store.save_baselines(models, ctx.path('baselines.json'))
    ctx.model('baseline', dataset.label, model_store.baselines_to_payload(models))
    return {'terrain': dataset.label, 'baselines': {variant: m.to_dict() for variant, m in models.items()}}


def cmd_synth(ctx):
    args = ctx.args
    config = ctx.config
    seed = int(config['SEED'])
    dt = float(config['DT'])
    specs = load_suite(args.suite or config['SUITE'])
    summary = {}
    for index, spec in enumerate(specs):
        script = command_script(args.script or config['SYNTH_SCRIPT'],
                                float(args.duration or config['SYNTH_DURATION_S']), dt, seed=seed + index,
                                v_max=float(config['V_REF_MAX']), omega_max=float(config['OMEGA_REF_MAX']))
        run = synth_generate(spec, script, dt, seed=spec.seed + seed)
        train, test = split_dataset(run.dataset)
        directory = ctx.path(spec.label)
        save_dataset(run.dataset, os.path.join(directory, 'data.csv'))
        save_dataset(train, os.path.join(directory, 'train.csv'))
        save_dataset(test, os.path.join(directory, 'test.csv'))
        run.hidden.to_csv(os.path.join(directory, 'hidden.csv'), index=False, float_format='%.17g')
        with open(os.path.join(directory, 'spec.json'), 'w') as f:
            json.dump(spec.to_dict(), f, sort_keys=True, indent=2)
        summary[spec.label] = {'records': len(run.dataset), 'train': len(train), 'test': len(test)}
    return {'dt': dt, 'terrains': summary}


def cmd_sweep(ctx):
    args = ctx.args
    config = ctx.config
    dataset = read_dataset(ctx, args.dataset, args.label)
    horizon = float(args.horizon or config['HORIZON_S'])
    reports = [sweep_errors(build_predictor(ctx, model, dataset, args.terrain), dataset, horizon)
               for model in args.model]
    rows = [report.to_dict() for report in reports]
    table = pd.DataFrame(rows)
    ctx.write_csv('table1.csv', table[['terrain', 'model', 'angular_pct', 'linear_pct', 'count']])
    ctx.write_csv('table2.csv', table[['terrain', 'model', 'omega_mae', 'v_mae', 'count']])
    return {'horizon_s': horizon, 'errors': rows}


def cmd_weights(ctx):
    args = ctx.args
    config = ctx.config
    dataset = read_dataset(ctx, args.dataset, args.label)
    params = model_store.load_params(ctx.input(require(args.params, '--params')))
    bank = model_store.load_bank(ctx.input(require(args.bank, '--bank')))
    trace = run_weight_trace(bank, dataset, int(config['ENSEMBLE_K']), float(config['ENSEMBLE_ALPHA']), params,
                             tol=float(config['SOLVER_TOL']), max_iters=int(config['SOLVER_MAX_ITERS']))
    ctx.write_csv('weights.csv', trace.to_frame())
    return {'terrain': dataset.label, 'labels': trace.labels, 'weights': trace.summary()}


def cmd_coverage(ctx):
    args = ctx.args
    config = ctx.config
    dt = float(config['DT'])
    params = model_store.load_params(ctx.input(require(args.params, '--params')))
    source = None
    if args.bank:
        bank = model_store.load_bank(ctx.input(args.bank))
        label = args.terrain or bank.labels[0]
        index = bank.index(label)
        if index is None:
            raise ValidationError(f'terrain {label!r} is not in the bank {bank.labels}')
        source = bank.entries[index]
    seed = int(config['SEED'])
    steps = horizon_steps(float(config['HORIZON_S']), dt)
    frames = []
    scenarios = default_scenarios(args.scenarios, steps, seed, float(config['V_REF_MAX']),
                                  float(config['OMEGA_REF_MAX']))
    for number, scenario in enumerate(scenarios):
        frame = run_coverage(params, source, scenario, dt, n_mc=int(config['N_MC']), seed=seed + number,
                             config=SigmaConfig(float(config['SIGMA_LAMBDA'])))
        frame.insert(0, 'scenario', number)
        frames.append(frame)
    coverage = pd.concat(frames, ignore_index=True)
    ctx.write_csv('coverage.csv', coverage)
    return {
        'scenarios': len(scenarios),
        'n_mc': int(config['N_MC']),
        'min_sigma': float(coverage['sigma_coverage'].min()),
        'min_linear': float(coverage['linear_coverage'].min()),
    }


def cmd_heatmap(ctx):
    args = ctx.args
    config = ctx.config
    dataset = read_dataset(ctx, args.dataset, args.label)
    predictor = build_predictor(ctx, args.model, dataset, args.terrain)
    grid = run_heatmap(predictor, dataset, bins=int(args.bins or config['HEATMAP_BINS']))
    frame = grid.to_frame()
    frame.insert(0, 'model', predictor.name)
    frame.insert(0, 'terrain', dataset.label)
    ctx.write_csv('heatmap.csv', frame)
    i, j = grid.max_error_bin()
    return {
        'terrain': dataset.label,
        'model': predictor.name,
        'empty_bins': int(grid.empty.sum()),
        'max_error_bin': {
            'v_ref': [float(grid.v_edges[i]), float(grid.v_edges[i + 1])],
            'omega_ref': [float(grid.omega_edges[j]), float(grid.omega_edges[j + 1])],
            'mean_abs_omega_error': float(grid.mean_error[i, j]),
        },
    }


def cmd_report(ctx):
    args = ctx.args
    config = ctx.config
    specs = load_suite(args.suite or config['SUITE'])
    result = run_benchmark(config, specs, seed=int(config['SEED']), n_scenarios=args.scenarios)
    ctx.write_csv('table1.csv', result.table1)
    ctx.write_csv('table2.csv', result.table2)
    ctx.write_csv('weights.csv', result.weights)
    ctx.write_csv('coverage.csv', result.coverage)
    ctx.write_csv('heatmap.csv', result.heatmap)
    model_store.save_params(result.params, ctx.path('params.json'))
    model_store.save_bank(result.bank, ctx.path('gp_bank.json'))
    ctx.model('params', specs[0].label, model_store.params_to_payload(result.params))
    ctx.model('gp_bank', None, model_store.bank_to_payload(result.bank))
    for label, models in result.baselines.items():
        model_store.save_baselines(models, ctx.path(f'baselines_{label}.json'))
        ctx.model('baseline', label, model_store.baselines_to_payload(models))
    return result.report


HANDLERS = {
    'identify': cmd_identify,
    'train-gp': cmd_train_gp,
    'train-baseline': cmd_train_baseline,
    'synth': cmd_synth,
    'sweep': cmd_sweep,
    'weights': cmd_weights,
    'coverage': cmd_coverage,
    'heatmap': cmd_heatmap,
    'report': cmd_report,
}


def build_parser():
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', help='JSON config file')
    common.add_argument('--seed', type=int, help='random seed (overrides SEED)')
    common.add_argument('--out', help='run directory (default runs/<command>)')
    common.add_argument('--verbose', action='store_true', help='debug logging')

    parser = ArgumentParser(prog='skidsteer', description='Skid-steer motion model toolkit')
    subparsers = parser.add_subparsers(dest='command', required=True, parser_class=ArgumentParser)

    identify = subparsers.add_parser('identify', parents=[common], help='identify nominal dynamic parameters')
    identify.add_argument('--dataset', required=True)
    identify.add_argument('--label')
    identify.add_argument('--no-refine', action='store_true', help='skip the output-error refinement')

    train_gp = subparsers.add_parser('train-gp', parents=[common], help='train a per-terrain residual GP bank')
    train_gp.add_argument('--params', required=True)
    train_gp.add_argument('--dataset', required=True, action='append', help='one per terrain, in bank order')

    train_baseline = subparsers.add_parser('train-baseline', parents=[common], help='fit kinematic baselines')
    train_baseline.add_argument('--dataset', required=True)
    train_baseline.add_argument('--label')
    train_baseline.add_argument('--variant', action='append', choices=VARIANTS)

    synth = subparsers.add_parser('synth', parents=[common], help='simulate a synthetic terrain suite')
    synth.add_argument('--suite', help='suite name under fixtures/suites or a directory of terrain specs')
    synth.add_argument('--script', choices=SCRIPTS)
    synth.add_argument('--duration', type=float)

    for name, help_text in (('sweep', 'moving-horizon error sweep'), ('heatmap', 'command-space error heatmap')):
        sub = subparsers.add_parser(name, parents=[common], help=help_text)
        sub.add_argument('--model', required=True, choices=MODEL_CHOICES,
                         action='append' if name == 'sweep' else 'store')
        sub.add_argument('--dataset', required=True)
        sub.add_argument('--label')
        sub.add_argument('--params')
        sub.add_argument('--bank')
        sub.add_argument('--baselines')
        sub.add_argument('--terrain', help='bank entry for --model gp (default: dataset label)')
        if name == 'sweep':
            sub.add_argument('--horizon', type=float)
        else:
            sub.add_argument('--bins', type=int)

    weights = subparsers.add_parser('weights', parents=[common], help='ensemble weight trace')
    weights.add_argument('--dataset', required=True)
    weights.add_argument('--label')
    weights.add_argument('--params', required=True)
    weights.add_argument('--bank', required=True)

    coverage = subparsers.add_parser('coverage', parents=[common], help='Monte-Carlo coverage check')
    coverage.add_argument('--params', required=True)
    coverage.add_argument('--bank')
    coverage.add_argument('--terrain')
    coverage.add_argument('--scenarios', type=int, default=3)

    report = subparsers.add_parser('report', parents=[common], help='full synthetic benchmark')
    report.add_argument('--suite')
    report.add_argument('--scenarios', type=int, default=3)
    return parser


def package_versions():
    versions = {'python': platform.python_version()}
    for package in PACKAGES:
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = None
    return versions


def plain_config(config):
    return {key: config[key] for key in sorted(config) if key.isupper()}


def record(ctx, exit_code, manifest):
    if str(ctx.config.get('REGISTRY_URI', 'none')).lower() == 'none':
        return None
    app = Flask('skidsteer')
    app.config['REGISTRY_URI'] = ctx.config['REGISTRY_URI']
    try:
        init_registry(app)
    except Exception as e:
        logger.warning('Run registry unavailable: %s', e)
        return None
    return record_run(app, ctx.args.command, manifest, exit_code, ctx.models if exit_code == 0 else ())


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 1

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        config = load_config(args.config, overrides={'SEED': args.seed})
        ctx = RunContext(args, config)
        if args.config:
            ctx.input(args.config)
    except (OSError, ValueError) as e:
        logger.error('%s', e)
        return 1

    exit_code = 0
    try:
        report = HANDLERS[args.command](ctx)
        ctx.write_json('report.json', report)
    except ValidationError as e:
        logger.error('%s', e)
        exit_code = 1
    except NumericalError as e:
        logger.error('Numerical failure: %s', e)
        exit_code = 2

    manifest = {
        'command': args.command,
        'argv': list(sys.argv[1:] if argv is None else argv),
        'inputs': ctx.inputs,
        'seed': int(config['SEED']),
        'config_hash': config_hash(config),
        'config': plain_config(config),
        'versions': package_versions(),
        'out_dir': ctx.out_dir,
        'exit_code': exit_code,
    }
    ctx.write_json('manifest.json', manifest)
    run_id = record(ctx, exit_code, manifest)
    if run_id is not None:
        logger.info('Recorded run %d', run_id)
    return exit_code


if __name__ == '__main__':
    sys.exit(cli_main())
