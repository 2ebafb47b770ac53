import numpy as np
import pytest

from src.errors import NotPSDError, ValidationError
from src.services.data import TerrainDataset
from src.services.gpr import (
    GpHyperparams, GpResidualModel, ResidualSample, build_residual_dataset, fit,
    negative_log_marginal_likelihood, optimize_hyperparams, predict, predict_batch, se_kernel,
    select_training_subset,
)


def _problem(rng, p=20, n=4):
    inputs = rng.uniform(-2.0, 2.0, size=(p, n))
    targets = np.sin(inputs[:, 0]) + 0.5 * inputs[:, 1] * inputs[:, 2] + 0.1 * rng.standard_normal(p)
    hyper = GpHyperparams.from_values(rng.uniform(0.5, 2.0, n), rng.uniform(0.5, 2.0), rng.uniform(0.05, 0.3))
    return inputs, targets, hyper


def test_hyperparams_round_trip_and_validation():
    hyper = GpHyperparams.from_values([1.0, 2.0], 3.0, 0.1)
    np.testing.assert_allclose(hyper.length_scales, [1.0, 2.0])
    assert hyper.signal_variance == pytest.approx(3.0)
    np.testing.assert_allclose(GpHyperparams.from_dict(hyper.to_dict()).to_vector(), hyper.to_vector())
    with pytest.raises(ValidationError):
        GpHyperparams.from_values([1.0, -1.0], 1.0, 0.1)


def test_se_kernel_values():
    hyper = GpHyperparams.from_values([1.0, 1.0], 2.0, 0.5)
    assert se_kernel([0.0, 0.0], [0.0, 0.0], hyper) == pytest.approx(2.0)
    assert se_kernel([0.0, 0.0], [0.0, 0.0], hyper, include_noise=True) == pytest.approx(2.5)
    assert se_kernel([1.0, 0.0], [0.0, 0.0], hyper) == pytest.approx(2.0 * np.exp(-0.5))
    assert se_kernel([1.0, 2.0], [0.5, -1.0], hyper) == pytest.approx(se_kernel([0.5, -1.0], [1.0, 2.0], hyper))


def test_nlml_gradient_matches_finite_differences(rng):
    for _ in range(10):
        inputs, targets, hyper = _problem(rng)
        analytic = negative_log_marginal_likelihood(inputs, targets, hyper).gradient
        theta = hyper.to_vector()
        numeric = np.empty_like(theta)
        h = 1e-5
        for j in range(theta.size):
            up, down = theta.copy(), theta.copy()
            up[j] += h
            down[j] -= h
            numeric[j] = (negative_log_marginal_likelihood(inputs, targets, GpHyperparams.from_vector(up)).value
                          - negative_log_marginal_likelihood(inputs, targets, GpHyperparams.from_vector(down)).value
                          ) / (2 * h)
        relative = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-3)
        assert relative.max() < 1e-4


def test_interpolates_training_points_at_tiny_noise(rng):
    inputs = rng.uniform(-3.0, 3.0, size=(12, 4))
    targets = rng.standard_normal(12)
    model = fit(inputs, targets, GpHyperparams.from_values(np.full(4, 0.8), 1.0, 1e-8))
    means, variances = predict_batch(model, inputs)
    assert np.max(np.abs(means - targets)) < 1e-4
    assert np.max(variances) < 1e-6


def test_prior_far_from_data(rng):
    inputs = rng.uniform(-1.0, 1.0, size=(10, 4))
    model = fit(inputs, rng.standard_normal(10), GpHyperparams.from_values(np.ones(4), 1.5, 0.01))
    mean, variance = predict(model, np.full(4, 100.0))
    assert mean == pytest.approx(0.0, abs=1e-12)
    assert variance == pytest.approx(1.5)
    _, noisy = predict(model, np.full(4, 100.0), include_noise=True)
    assert noisy == pytest.approx(1.51)


def test_duplicate_inputs_without_noise_are_not_psd():
    inputs = np.array([[0.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]])
    with pytest.raises(NotPSDError):
        fit(inputs, [1.0, 1.0, 2.0], GpHyperparams.from_values(np.ones(4), 1.0, 0.0))
    # with noise the same inputs factor fine
    model = fit(inputs, [1.0, 1.0, 2.0], GpHyperparams.from_values(np.ones(4), 1.0, 1e-4))
    assert model.n_train == 3


def test_fit_validates_shapes():
    with pytest.raises(ValidationError):
        fit(np.zeros((3, 4)), [1.0, 2.0], GpHyperparams.from_values(np.ones(4), 1.0, 0.1))
    with pytest.raises(ValidationError):
        fit(np.zeros((3, 2)), [1.0, 2.0, 3.0], GpHyperparams.from_values(np.ones(4), 1.0, 0.1))


def test_optimize_improves_marginal_likelihood(rng):
    inputs, targets, _ = _problem(rng, p=40)
    init = GpHyperparams.from_values(np.full(4, 5.0), 0.1, 0.5)
    best = optimize_hyperparams(inputs, targets, init, max_iters=100, restarts=2, seed=0)
    before = negative_log_marginal_likelihood(inputs, targets, init).value
    after = negative_log_marginal_likelihood(inputs, targets, best).value
    assert after < before
    assert optimize_hyperparams(inputs, targets, init, max_iters=0) is init


def test_standardized_fit_predicts_in_original_units(rng):
    inputs = rng.uniform(-1.0, 1.0, size=(30, 4)) * np.array([100.0, 1.0, 0.01, 1.0])
    targets = inputs[:, 0] / 100.0
    model = fit(inputs, targets, GpHyperparams.from_values(np.full(4, 2.0), 1.0, 1e-6), standardize=True)
    np.testing.assert_allclose(model.input_mean, inputs.mean(axis=0))
    means, _ = predict_batch(model, inputs[:5])
    np.testing.assert_allclose(means, targets[:5], atol=1e-3)


def test_residual_dataset_skips_gaps(true_params):
    t = np.array([0.0, 0.1, 0.2, 0.5, 0.6])
    states = np.zeros((5, 5))
    states[:, 3] = 0.1
    controls = np.tile([0.4, 0.0], (5, 1))
    dataset = TerrainDataset.from_arrays('gappy', t, states, controls)
    residuals = build_residual_dataset(dataset, true_params, 0.1)
    assert residuals.skipped == 1
    assert len(residuals) == 3
    assert residuals.inputs.shape == (3, 4)
    # v = v_ref / c4 is the nominal steady state, so the residual vanishes
    np.testing.assert_allclose(residuals.targets_v, 0.0, atol=1e-12)


def test_residual_dataset_needs_velocities(true_params):
    dataset = TerrainDataset.from_arrays('poses', [0.0, 0.1], np.zeros((2, 3)), np.zeros((2, 2)))
    with pytest.raises(ValidationError):
        build_residual_dataset(dataset, true_params, 0.1)


def test_training_subset_is_bounded(rng):
    samples = [ResidualSample(z, 0.0, 0.0) for z in rng.standard_normal((300, 4))]
    subset = select_training_subset(samples, 25, seed=0)
    assert 1 <= len(subset) <= 25
    assert all(any(s is original for original in samples) for s in subset)
    assert len(select_training_subset(samples[:10], 25)) == 10
    with pytest.raises(ValidationError):
        select_training_subset([], 5)


def test_terrain_gp_learns_held_out_residuals(suite, true_params):
    for model in suite['bank']:
        held_out = build_residual_dataset(suite['test'][model.label], true_params, 0.1)
        means, covs = model.residual_batch(held_out.inputs)
        assert covs.shape == (len(held_out), 2, 2)
        for column, targets in ((0, held_out.targets_v), (1, held_out.targets_omega)):
            rmse = np.sqrt(np.mean((means[:, column] - targets) ** 2))
            assert rmse <= 0.25 * np.std(targets), (model.label, column)


def test_residual_model_round_trip(small_bank):
    entry = small_bank.entries[0]
    restored = GpResidualModel.from_dict(entry.to_dict())
    z = np.array([[0.5, 0.2, 1.0, 0.5], [1.0, -0.5, 1.5, -1.0]])
    np.testing.assert_allclose(restored.mean_batch(z), entry.mean_batch(z), rtol=1e-10, atol=1e-12)
    single = entry.residual(z[0])
    np.testing.assert_allclose(single.mean, entry.mean_batch(z[:1])[0])


def test_posterior_variance_never_exceeds_the_prior(rng):
    inputs, targets, hyper = _problem(rng, p=30)
    model = fit(inputs, targets, hyper)
    _, variances = predict_batch(model, rng.uniform(-4.0, 4.0, size=(1000, 4)))
    assert np.all(variances >= 0.0)
    assert np.all(variances <= hyper.signal_variance + 1e-12)


def test_predictive_mean_is_linear_in_targets(rng):
    inputs, y1, hyper = _problem(rng)
    y2 = rng.standard_normal(len(y1))
    queries = rng.uniform(-2.0, 2.0, size=(50, 4))
    mean1, _ = predict_batch(fit(inputs, y1, hyper), queries)
    mean2, _ = predict_batch(fit(inputs, y2, hyper), queries)
    combined, _ = predict_batch(fit(inputs, 2.0 * y1 - 3.0 * y2, hyper), queries)
    np.testing.assert_allclose(combined, 2.0 * mean1 - 3.0 * mean2, atol=1e-10)


def test_cholesky_factor_reconstructs_the_kernel_matrix(rng):
    inputs, targets, hyper = _problem(rng, p=50)
    model = fit(inputs, targets, hyper)
    gram = np.array([[se_kernel(a, b, hyper) for b in inputs] for a in inputs])
    expected = gram + (hyper.noise_variance + model.jitter) * np.eye(50)
    np.testing.assert_allclose(model.chol @ model.chol.T, expected, atol=1e-8)
    assert np.allclose(np.triu(model.chol, 1), 0.0)


def test_nlml_data_fit_term(rng):
    inputs, targets, hyper = _problem(rng)
    assert negative_log_marginal_likelihood(inputs, np.zeros(len(targets)), hyper).data_fit == 0.0

    base = negative_log_marginal_likelihood(inputs, targets, hyper)
    scaled_hyper = GpHyperparams.from_values(hyper.length_scales, 4.0 * hyper.signal_variance,
                                             4.0 * hyper.noise_variance)
    scaled = negative_log_marginal_likelihood(inputs, 2.0 * targets, scaled_hyper)
    assert scaled.data_fit == pytest.approx(base.data_fit, rel=1e-10)
    # only the log-determinant moves, by p log 2
    assert scaled.value - base.value == pytest.approx(len(targets) * np.log(2.0), rel=1e-9)


def test_optimize_reaches_the_generating_hyperparameters(rng):
    truth = GpHyperparams.from_values(np.ones(4), 1.0, 0.01)
    inputs = rng.uniform(-2.0, 2.0, size=(200, 4))
    prior = fit(inputs, np.zeros(200), truth)
    targets = prior.chol @ rng.standard_normal(200)

    best = optimize_hyperparams(inputs, targets, truth, max_iters=200, restarts=1, seed=0)
    at_truth = negative_log_marginal_likelihood(inputs, targets, truth).value
    optimum = negative_log_marginal_likelihood(inputs, targets, best)
    assert optimum.value <= at_truth + 1e-3

    again = optimize_hyperparams(inputs, targets, best, max_iters=50, restarts=0)
    settled = negative_log_marginal_likelihood(inputs, targets, again)
    assert settled.value <= optimum.value + 1e-9
    assert np.linalg.norm(settled.gradient) < 1e-3


def test_training_subset_picks_one_point_per_blob(rng):
    centers = np.array([[0.0, 0.0, 0.0, 0.0], [20.0, 0.0, 0.0, 0.0], [0.0, 20.0, 0.0, 0.0],
                        [0.0, 0.0, 20.0, 0.0], [0.0, 0.0, 0.0, 20.0]])
    blob = np.repeat(np.arange(5), 30)
    points = centers[blob] + 0.1 * rng.standard_normal((150, 4))
    samples = [ResidualSample(z, float(b), 0.0) for z, b in zip(points, blob)]
    subset = select_training_subset(samples, 5, seed=0)
    assert sorted(int(s.g_v) for s in subset) == [0, 1, 2, 3, 4]
