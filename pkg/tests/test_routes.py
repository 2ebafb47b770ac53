import numpy as np
import pytest

from conftest import TRUE_C, synthesize
from src.main import create_app
from src.models.run import record_run
from src.services.ensemble import history_records
from src.services.model_store import bank_to_payload

PARAMS = {'c': list(TRUE_C), 'a': 0.0}


@pytest.fixture
def app(small_bank):
    app = create_app({'REGISTRY_URI': 'none', 'TESTING': True})
    manifest = {'seed': 0, 'config_hash': 'abc', 'out_dir': 'runs/train-gp'}
    record_run(app, 'train-gp', manifest, 0,
               models=[('params', 'asphalt', PARAMS), ('gp_bank', None, bank_to_payload(small_bank))])
    record_run(app, 'synth', {'seed': 1, 'config_hash': 'def', 'out_dir': 'runs/synth'}, 0)
    return app


@pytest.fixture
def client(app):
    return app.test_client()


def _propagate(client, **body):
    payload = {'mean': [0.0, 0.0, 0.0, 0.5, 0.1], 'controls': [[1.0, 0.5]] * 5, 'params': PARAMS}
    payload.update(body)
    return client.post('/api/predict/propagate', json=payload)


def test_health(client):
    response = client.get('/api/health')
    assert response.status_code == 200
    assert response.get_json()['status'] == 'healthy'


def test_unknown_route_is_json(client):
    response = client.get('/api/nothing-here')
    assert response.status_code == 404
    assert response.get_json() == {'error': 'Not found'}


def test_wrong_method_is_json(client):
    response = client.get('/api/predict/propagate')
    assert response.status_code == 405
    assert 'error' in response.get_json()


def test_runs_listing_and_pagination(client):
    data = client.get('/api/runs').get_json()
    assert data['pagination']['total'] == 2
    assert [run['command'] for run in data['runs']] == ['synth', 'train-gp']

    page = client.get('/api/runs?per_page=1&page=2').get_json()
    assert len(page['runs']) == 1
    assert page['pagination']['has_prev'] and not page['pagination']['has_next']

    filtered = client.get('/api/runs?command=train-gp').get_json()
    assert [run['command'] for run in filtered['runs']] == ['train-gp']


def test_run_detail_and_models(client):
    run = client.get('/api/runs/1').get_json()['run']
    assert run['manifest']['config_hash'] == 'abc'
    assert [model['kind'] for model in run['models']] == ['params', 'gp_bank']
    assert 'payload' not in run['models'][0]
    model = client.get('/api/models/1').get_json()['model']
    assert model['payload'] == PARAMS
    assert client.get('/api/runs/42').status_code == 404
    assert client.get('/api/models/42').get_json() == {'error': 'Model not found'}


def test_propagate_nominal_with_inline_params(client):
    response = _propagate(client, cov=(np.eye(5) * 1e-4).tolist())
    assert response.status_code == 200
    data = response.get_json()
    assert data['method'] == 'sigma' and data['dt'] == 0.1
    assert len(data['beliefs']) == 6
    assert len(data['beliefs'][-1]['cov']) == 5
    assert data['beliefs'][-1]['mean'][0] > 0.0


def test_propagate_linear_from_registry_params(client):
    response = _propagate(client, params=None, params_model_id=1, method='linear')
    assert response.status_code == 200
    assert len(response.get_json()['beliefs']) == 6


def test_propagate_with_terrain_gp_and_ensemble(client):
    single = _propagate(client, bank_model_id=2, terrain='grass')
    assert single.status_code == 200
    ensemble = _propagate(client, bank_model_id=2, weights=[0.0, 1.0])
    assert ensemble.status_code == 200
    np.testing.assert_allclose(ensemble.get_json()['beliefs'][-1]['mean'],
                               single.get_json()['beliefs'][-1]['mean'], atol=1e-9)


def test_propagate_errors(client):
    assert _propagate(client, bank_model_id=2, terrain='ice').status_code == 400
    assert _propagate(client, bank_model_id=99).status_code == 404
    assert _propagate(client, bank_model_id=1).status_code == 400
    assert _propagate(client, method='particle').status_code == 400
    assert _propagate(client, dt=0.0).status_code == 400
    assert _propagate(client, mean=[0.0, 0.0]).status_code == 400
    assert _propagate(client, params=None).status_code == 400
    not_psd = np.diag([1.0, 1.0, 1.0, 1.0, -1.0]).tolist()
    response = _propagate(client, cov=not_psd)
    assert response.status_code == 422
    assert 'error' in response.get_json()
    too_fast = _propagate(client, controls=[[1.0, 0.5], [2.5, 0.0]])
    assert too_fast.status_code == 400
    assert 'envelope' in too_fast.get_json()['error']
    missing = client.post('/api/predict/propagate', json={'mean': [0.0] * 5})
    assert missing.get_json() == {'error': 'controls is required'}


def test_weights_endpoint(client, specs):
    run = synthesize(specs[1], duration=5.0, seed=8)
    records = history_records(run.dataset.states(), run.dataset.controls())[:10]
    history = [{'z': r.z.tolist(), 'v_next': r.v_next, 'omega_next': r.omega_next} for r in records]
    response = client.post('/api/predict/weights', json={'bank_model_id': 2, 'params': PARAMS, 'history': history})
    assert response.status_code == 200
    data = response.get_json()
    assert data['labels'] == ['asphalt', 'grass']
    assert sum(data['weights']) == pytest.approx(1.0, abs=1e-8)
    assert min(data['weights']) >= -1e-12
    assert data['argmax'] in data['labels']


def test_weights_endpoint_errors(client):
    body = {'bank_model_id': 2, 'params': PARAMS}
    assert client.post('/api/predict/weights', json=body).status_code == 400
    assert client.post('/api/predict/weights', json={**body, 'history': []}).status_code == 400
    bad_record = {**body, 'history': [{'z': [0.0, 0.0, 1.0, 0.0]}]}
    assert client.post('/api/predict/weights', json=bad_record).status_code == 400
    record = {'z': [0.1, 0.0, 1.0, 0.0], 'v_next': 0.2, 'omega_next': 0.0}
    wrong_width = {**body, 'history': [record], 'w_prev': [0.2, 0.3, 0.5]}
    assert client.post('/api/predict/weights', json=wrong_width).status_code == 400
