from flask import Blueprint, request, jsonify, current_app
import numpy as np
from src.errors import NumericalError, ValidationError
from src.models.run import db, TrainedModel
from src.models.state import Control, GaussianBelief, STATE_DIM
from src.services.ensemble import (
    EnsembleGp, EnsembleWeights, HistoryRecord, MotionHistory, build_weight_problem, solve_weights,
)
from src.services.model_store import PAYLOAD_READERS
from src.services.propagation import SigmaConfig, propagate_horizon, propagate_linear

predict_bp = Blueprint('predict', __name__)

PROPAGATION_METHODS = ('sigma', 'linear')


class ModelNotFound(LookupError):
    pass


def load_model(model_id, kind):
    """Decode a registry payload of the given kind"""
    model = db.session.get(TrainedModel, int(model_id))
    if not model:
        raise ModelNotFound(f'Model {model_id} not found')
    if model.kind != kind:
        raise ValidationError(f'Model {model_id} is a {model.kind}, expected {kind}')
    return PAYLOAD_READERS[kind](model.get_payload())


def resolve_params(data):
    if data.get('params_model_id') is not None:
        return load_model(data['params_model_id'], 'params')
    if not isinstance(data.get('params'), dict):
        raise ValidationError('params or params_model_id is required')
    return PAYLOAD_READERS['params'](data['params'])


def resolve_source(data, params, dt):
    """None (nominal), a single terrain GP, or an ensemble with fixed weights"""
    if data.get('bank_model_id') is None:
        return None
    bank = load_model(data['bank_model_id'], 'gp_bank')
    if data.get('terrain'):
        index = bank.index(data['terrain'])
        if index is None:
            raise ValidationError(f"Terrain {data['terrain']!r} is not in the bank {bank.labels}")
        return bank.entries[index]
    weights = EnsembleWeights(data['weights']) if data.get('weights') is not None else None
    return EnsembleGp(bank, params, dt, weights=weights, method=current_app.config['INTEGRATOR'])


def _error_response(e):
    if isinstance(e, ModelNotFound):
        return jsonify({'error': str(e)}), 404
    if isinstance(e, ValidationError):
        return jsonify({'error': str(e)}), 400
    if isinstance(e, NumericalError):
        return jsonify({'error': str(e)}), 422
    current_app.logger.exception('Prediction request failed')
    return jsonify({'error': str(e)}), 500


@predict_bp.route('/predict/propagate', methods=['POST'])
def propagate():
    try:
        data = request.get_json(silent=True)

        # Validate required fields
        for field in ['mean', 'controls']:
            if not data or data.get(field) is None:
                return jsonify({'error': f'{field} is required'}), 400

        method = data.get('method', 'sigma')
        if method not in PROPAGATION_METHODS:
            return jsonify({'error': f'method must be one of {list(PROPAGATION_METHODS)}'}), 400

        config = current_app.config
        dt = float(data.get('dt', config['DT']))
        if dt <= 0:
            return jsonify({'error': 'dt must be positive'}), 400

        params = resolve_params(data)
        source = resolve_source(data, params, dt)
        cov = data.get('cov')
        belief0 = GaussianBelief(
            np.asarray(data['mean'], dtype=float),
            np.zeros((STATE_DIM, STATE_DIM)) if cov is None else np.asarray(cov, dtype=float)
        )
        controls = np.asarray(data['controls'], dtype=float)
        for row in np.atleast_2d(controls):
            if not Control.from_array(row).within_bounds(float(config['V_REF_MAX']), float(config['OMEGA_REF_MAX'])):
                return jsonify({'error': f'control {row.tolist()} is outside the command envelope'}), 400

        if method == 'sigma':
            trajectory = propagate_horizon(belief0, controls, source, params, dt,
                                           SigmaConfig(float(config['SIGMA_LAMBDA'])), config['INTEGRATOR'])
        else:
            trajectory = propagate_linear(belief0, controls, source, params, dt, config['INTEGRATOR'])

        return jsonify({
            'method': method,
            'dt': dt,
            'beliefs': [belief.to_dict() for belief in trajectory.beliefs]
        }), 200

    except Exception as e:
        return _error_response(e)


@predict_bp.route('/predict/weights', methods=['POST'])
def weights():
    try:
        data = request.get_json(silent=True)

        # Validate required fields
        for field in ['bank_model_id', 'history']:
            if not data or data.get(field) is None:
                return jsonify({'error': f'{field} is required'}), 400
        if not data['history']:
            return jsonify({'error': 'history must contain at least one record'}), 400

        config = current_app.config
        dt = float(data.get('dt', config['DT']))
        params = resolve_params(data)
        bank = load_model(data['bank_model_id'], 'gp_bank')
        alpha = float(data.get('alpha', config['ENSEMBLE_ALPHA']))

        history = MotionHistory(len(data['history']))
        for record in data['history']:
            try:
                history.push(HistoryRecord(record['z'], record['v_next'], record['omega_next']))
            except (KeyError, TypeError):
                raise ValidationError('history records need z, v_next and omega_next')

        w_prev = (EnsembleWeights(data['w_prev']) if data.get('w_prev') is not None
                  else EnsembleWeights.uniform(len(bank)))
        if len(w_prev) != len(bank):
            raise ValidationError(f'{len(w_prev)} weights for a bank of {len(bank)} terrains')

        problem = build_weight_problem(bank, history, params, dt, method=config['INTEGRATOR'])
        solved = solve_weights(*problem, w_prev, alpha,
                               tol=float(config['SOLVER_TOL']), max_iters=int(config['SOLVER_MAX_ITERS']))

        return jsonify({
            'labels': bank.labels,
            'weights': solved.w.tolist(),
            'argmax': bank.labels[solved.argmax]
        }), 200

    except Exception as e:
        return _error_response(e)
