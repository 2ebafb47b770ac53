import math

import numpy as np
import pytest

from conftest import TRUE_C, DT, clean_spec, synthesize
from src.errors import InsufficientExcitationError, ValidationError
from src.models.state import Control, State5
from src.services.dynamics import (
    DynamicParams, IdentificationSample, LowPassFilter, dynamic_rates_nominal, identification_log,
    identify_params, kinematic_rates, lowpass, lowpass_array, step_array, step_nominal,
)
from src.services.data import command_script


def _log_from(dataset):
    states = dataset.states()
    return identification_log(states[:, 3:], dataset.controls(), dataset.dt)


def test_params_validation():
    with pytest.raises(ValidationError):
        DynamicParams((0.0, 1.0, 0.2, 4.0, 0.5, 3.0))
    with pytest.raises(ValidationError):
        DynamicParams((5.0, 1.0, 0.2))
    params = DynamicParams.from_dict({'c': list(TRUE_C), 'a': 0.1})
    assert params.to_dict() == {'c': list(TRUE_C), 'a': 0.1}


def test_kinematic_rates_with_com_offset():
    rates = kinematic_rates([0.0, 0.0, math.pi / 2], 1.0, 2.0, 0.5)
    np.testing.assert_allclose(rates, [-1.0, 1.0, 2.0], atol=1e-12)


def test_nominal_rates_match_closed_form(true_params):
    rates = dynamic_rates_nominal([1.0, 0.5], Control(2.0, 1.0), true_params)
    c1, c2, c3, c4, c5, c6 = TRUE_C
    assert rates[0] == pytest.approx((c3 / c1) * 0.25 - (c4 / c1) * 1.0 + 2.0 / c1)
    assert rates[1] == pytest.approx(-(c5 / c2) * 0.5 - (c6 / c2) * 0.5 + 1.0 / c2)


def test_rest_is_a_fixed_point(true_params):
    x = State5(1.0, -2.0, 0.3, 0.0, 0.0)
    np.testing.assert_allclose(step_nominal(x, Control(0.0, 0.0), true_params, DT).as_array(), x.as_array())


def test_velocity_settles_to_steady_state(true_params):
    x = np.zeros(5)
    for _ in range(200):
        x = step_array(x, [2.0, 0.0], true_params, DT)
    # v' = 0 with omega = 0 gives v = v_ref / c4
    assert x[3] == pytest.approx(2.0 / TRUE_C[3], rel=1e-6)
    assert x[4] == pytest.approx(0.0, abs=1e-12)


def test_euler_converges_to_rk4(true_params):
    x0 = np.array([0.0, 0.0, 0.0, 0.3, 0.2])
    u = [1.0, 1.5]
    reference = step_array(x0, u, true_params, DT)
    coarse = step_array(x0, u, true_params, DT, method='euler')
    fine = step_array(x0, u, true_params, DT, method='euler', substeps=100)
    assert np.linalg.norm(fine - reference) < np.linalg.norm(coarse - reference) / 10


def test_step_array_batches_and_wraps(true_params):
    states = np.zeros((3, 5))
    states[:, 2] = math.pi - 0.01
    states[:, 4] = 1.0
    out = step_array(states, np.array([[0.0, 4.0]] * 3), true_params, DT)
    assert out.shape == (3, 5)
    assert np.all(out[:, 2] <= math.pi) and np.all(out[:, 2] > -math.pi)
    with pytest.raises(ValidationError):
        step_array(states, [0.0, 0.0], true_params, -0.1)
    with pytest.raises(ValidationError):
        step_array(states, [0.0, 0.0], true_params, DT, method='midpoint')


def test_lowpass_filter_matches_array_form():
    samples = np.array([1.0, 3.0, -2.0, 0.5, 4.0])
    filt = LowPassFilter(beta=0.3)
    looped = [lowpass(filt, s) for s in samples]
    np.testing.assert_allclose(lowpass_array(samples, 0.3), looped)
    assert looped[0] == 1.0
    filt.reset()
    assert filt.update(7.0) == 7.0
    with pytest.raises(ValidationError):
        LowPassFilter(beta=0.0)


def test_identification_log_records():
    etas = np.array([[0.0, 0.0], [0.2, 0.1], [0.6, 0.1]])
    controls = np.array([[1.0, 0.5], [1.0, 0.0], [0.0, 0.0]])
    log = identification_log(etas, controls, 0.1)
    assert len(log) == 2
    first = log.samples[0]
    np.testing.assert_allclose(first.eta, [0.1, 0.05])
    np.testing.assert_allclose(first.eta_dot, [2.0, 1.0])
    np.testing.assert_allclose(first.u, [1.0, 0.5])


def test_identify_recovers_parameters_on_clean_data():
    run = synthesize(clean_spec(), duration=50.0, seed=3)
    result = identify_params(_log_from(run.dataset))
    np.testing.assert_allclose(result.params.c, TRUE_C, rtol=0.01)
    assert result.refined
    assert result.relative_residual < 1e-3
    assert result.condition_number < 1e10


def test_identify_tolerates_velocity_noise():
    run = synthesize(clean_spec(noise_std=(0.01, 0.01), seed=5), duration=50.0, seed=4)
    result = identify_params(_log_from(run.dataset))
    np.testing.assert_allclose(result.params.c, TRUE_C, rtol=0.1)


def test_identify_rejects_constant_commands(true_params):
    controls = np.tile([1.0, 0.5], (100, 1))
    states = np.zeros((100, 5))
    for k in range(99):
        states[k + 1] = step_array(states[k], controls[k], true_params, DT)
    with pytest.raises(InsufficientExcitationError):
        identify_params(identification_log(states[:, 3:], controls, DT))


def test_identify_needs_enough_records():
    samples = [IdentificationSample(np.zeros(2), np.zeros(2), np.zeros(2))] * 10
    with pytest.raises(ValidationError):
        identify_params(samples)


def test_identify_is_exact_on_self_generated_data(true_params):
    controls = command_script('pseudo_random', 50.0, DT, seed=3)
    states = np.zeros((len(controls), 5))
    for k in range(len(controls) - 1):
        states[k + 1] = step_array(states[k], controls[k], true_params, DT)
    result = identify_params(identification_log(states[:, 3:], controls, DT))
    assert result.refined
    assert result.relative_residual < 1e-6
    np.testing.assert_allclose(result.params.c, TRUE_C, rtol=1e-6)


def test_nominal_rates_are_affine_in_the_command(true_params, rng):
    for _ in range(20):
        eta = rng.uniform(-2.0, 2.0, 2)
        u1, u2 = rng.uniform(-2.0, 2.0, 2), rng.uniform(-4.0, 4.0, 2)
        base = dynamic_rates_nominal(eta, [0.0, 0.0], true_params)
        combined = dynamic_rates_nominal(eta, u1 + u2, true_params) - base
        separate = (dynamic_rates_nominal(eta, u1, true_params) - base) + \
                   (dynamic_rates_nominal(eta, u2, true_params) - base)
        np.testing.assert_allclose(combined, separate, atol=1e-12)


def _random_states(rng, n, theta_range):
    return np.column_stack([
        rng.uniform(-5.0, 5.0, n),
        rng.uniform(-5.0, 5.0, n),
        rng.uniform(-theta_range, theta_range, n),
        rng.uniform(-0.4, 2.0, n),
        rng.uniform(-2.0, 2.0, n),
    ])


def test_step_matches_fine_euler_integration(true_params, rng):
    dt = 0.01
    states = _random_states(rng, 20, 3.0)
    controls = np.column_stack([rng.uniform(-0.4, 2.0, 20), rng.uniform(-4.0, 4.0, 20)])
    reference = step_array(states, controls, true_params, dt, method='euler', substeps=10000)
    for x, u, expected in zip(states, controls, reference):
        stepped = step_nominal(State5.from_array(x), Control.from_array(u), true_params, dt)
        np.testing.assert_allclose(stepped.as_array(), expected, atol=1e-6)


def test_rk4_global_error_is_fourth_order(true_params, rng):
    # Halving the step over a fixed 1 s horizon shrinks the error about 16x
    states = _random_states(rng, 8, 0.5)
    controls = np.column_stack([rng.uniform(0.0, 2.0, 8), rng.uniform(-2.0, 2.0, 8)])
    reference = step_array(states, controls, true_params, 1.0, substeps=1000)
    coarse = np.linalg.norm(step_array(states, controls, true_params, 1.0, substeps=10) - reference)
    fine = np.linalg.norm(step_array(states, controls, true_params, 1.0, substeps=20) - reference)
    assert 12.0 < coarse / fine < 20.0
