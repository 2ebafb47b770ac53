import numpy as np
import pytest

from conftest import DT
from src.errors import ValidationError
from src.services.ensemble import (
    EnsembleGp, EnsembleWeights, HistoryRecord, MotionHistory, TerrainGpBank, build_weight_problem,
    ensemble_predict, ensemble_predict_batch, history_records, project_simplex, prox_simplex_l1,
    solve_weights, weight_objective,
)


def _simplex_grid(m, resolution=1e-3):
    steps = int(round(1 / resolution))
    if m == 1:
        return np.ones((1, 1))
    if m == 2:
        a = np.arange(steps + 1) / steps
        return np.column_stack([a, 1 - a])
    a, b = np.meshgrid(np.arange(steps + 1), np.arange(steps + 1), indexing='ij')
    keep = a + b <= steps
    a, b = a[keep] / steps, b[keep] / steps
    return np.column_stack([a, b, np.clip(1 - a - b, 0.0, 1.0)])


def _grid_objective(grid, F_v, F_omega, Y_v, Y_omega, w_prev, alpha):
    rv = Y_v[:, None] - F_v @ grid.T
    rw = Y_omega[:, None] - F_omega @ grid.T
    return np.sum(rv ** 2, axis=0) + np.sum(rw ** 2, axis=0) + alpha * np.abs(grid - w_prev).sum(axis=1)


def test_weights_validation():
    assert EnsembleWeights.uniform(4).w.tolist() == [0.25] * 4
    with pytest.raises(ValidationError):
        EnsembleWeights([0.7, 0.7])
    with pytest.raises(ValidationError):
        EnsembleWeights([1.2, -0.2])
    assert EnsembleWeights([0.1, 0.9]).argmax == 1


def test_project_simplex():
    np.testing.assert_allclose(project_simplex([0.2, 0.3, 0.5]), [0.2, 0.3, 0.5])
    np.testing.assert_allclose(project_simplex([2.0, 0.0]), [1.0, 0.0])
    np.testing.assert_allclose(project_simplex([1.0, 1.0, 1.0]), [1 / 3] * 3)
    projected = project_simplex([-1.0, 0.5, 3.0, 0.2])
    assert projected.sum() == pytest.approx(1.0)
    assert projected.min() >= 0.0


def test_prox_reduces_to_projection_without_trust_term():
    y = np.array([0.9, -0.3, 0.6])
    np.testing.assert_allclose(prox_simplex_l1(y, np.full(3, 1 / 3), 0.0), project_simplex(y))


def test_prox_stays_at_center_for_large_tau():
    center = np.array([0.2, 0.5, 0.3])
    np.testing.assert_allclose(prox_simplex_l1(center + np.array([0.01, -0.02, 0.01]), center, 10.0), center)


def test_solver_matches_grid_search():
    rng = np.random.default_rng(7)
    for trial in range(100):
        m = int(rng.integers(1, 4))
        k = int(rng.integers(1, 11))
        F_v = rng.normal(size=(k, m))
        F_omega = rng.normal(size=(k, m))
        Y_v = rng.normal(size=k)
        Y_omega = rng.normal(size=k)
        w_prev = EnsembleWeights(rng.dirichlet(np.ones(m)))
        alpha = float(rng.choice([0.0, 1e-3, 0.1, 1.0]))
        solved = solve_weights(F_v, F_omega, Y_v, Y_omega, w_prev, alpha)
        assert solved.w.min() >= -1e-8
        assert abs(solved.w.sum() - 1.0) <= 1e-8
        assert solved.timestamp == w_prev.timestamp + 1
        best = _grid_objective(_simplex_grid(m), F_v, F_omega, Y_v, Y_omega, w_prev.w, alpha).min()
        value = weight_objective(solved.w, F_v, F_omega, Y_v, Y_omega, w_prev.w, alpha)
        assert value <= best + 1e-6, trial


def test_solver_keeps_previous_weights_without_information():
    w_prev = EnsembleWeights([0.6, 0.4], timestamp=3)
    solved = solve_weights(np.zeros((5, 2)), np.zeros((5, 2)), np.ones(5), np.ones(5), w_prev, 0.1)
    np.testing.assert_allclose(solved.w, w_prev.w)
    assert solved.timestamp == 4


def test_solver_splits_identical_columns():
    column = np.linspace(0.1, 1.0, 8)
    F = np.column_stack([column, column])
    solved = solve_weights(F, F, column, column, EnsembleWeights.uniform(2), 0.0)
    assert solved.w.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(solved.w, [0.5, 0.5], atol=1e-6)


def test_solver_rejects_bad_shapes():
    with pytest.raises(ValidationError):
        solve_weights(np.zeros((3, 2)), np.zeros((3, 3)), np.zeros(3), np.zeros(3), EnsembleWeights.uniform(2), 0.1)
    with pytest.raises(ValidationError):
        solve_weights(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros(3), np.zeros(3), EnsembleWeights.uniform(2), -1.0)


def test_history_is_a_ring_buffer():
    history = MotionHistory(3)
    for k in range(5):
        history.push(HistoryRecord(np.full(4, float(k)), float(k), float(k)))
    assert len(history) == 3 and history.is_full
    z, measured = history.arrays()
    np.testing.assert_array_equal(z[:, 0], [2.0, 3.0, 4.0])
    np.testing.assert_array_equal(measured[:, 1], [2.0, 3.0, 4.0])
    with pytest.raises(ValidationError):
        history.push(HistoryRecord(np.zeros(3), 0.0, 0.0))
    history.clear()
    assert len(history) == 0
    with pytest.raises(ValidationError):
        MotionHistory(0)


def test_ensemble_prediction_mixes_entries(small_bank):
    z = np.array([[0.5, 0.3, 1.0, 0.8], [1.0, -0.2, 1.5, -0.5]])
    first = EnsembleWeights([1.0, 0.0])
    means, covs = ensemble_predict_batch(small_bank, first, z)
    entry_means, entry_covs = small_bank.entries[0].residual_batch(z)
    np.testing.assert_allclose(means, entry_means)
    np.testing.assert_allclose(covs, entry_covs, atol=1e-15)

    half = EnsembleWeights([0.5, 0.5])
    mixed = ensemble_predict(small_bank, half, z[0])
    expected = 0.5 * small_bank.entries[0].mean_batch(z[:1])[0] + 0.5 * small_bank.entries[1].mean_batch(z[:1])[0]
    np.testing.assert_allclose(mixed.mean, expected, atol=1e-12)
    with pytest.raises(ValidationError):
        ensemble_predict(small_bank, EnsembleWeights.uniform(3), z[0])


def test_weight_problem_shapes(small_bank, true_params):
    history = MotionHistory(4)
    for k in range(4):
        history.push(HistoryRecord(np.array([0.1 * k, 0.0, 1.0, 0.5]), 0.1 * k, 0.05))
    problem = build_weight_problem(small_bank, history, true_params, DT)
    assert problem.F_v.shape == (4, 2) and problem.F_omega.shape == (4, 2)
    assert problem.Y_v.shape == (4,)
    with pytest.raises(ValidationError):
        build_weight_problem(small_bank, MotionHistory(2), true_params, DT)


def _records(dataset):
    return history_records(dataset.states(), dataset.controls())


def test_ensemble_identifies_each_terrain(suite, true_params):
    bank = suite['bank']
    for index, label in enumerate(bank.labels):
        ensemble = EnsembleGp(bank, true_params, DT, k=10, alpha=1e-3)
        np.testing.assert_allclose(ensemble.weights.w, np.full(len(bank), 1 / len(bank)))
        trace = ensemble.observe_many(_records(suite['test'][label])[:40])
        assert any(w.argmax == index for w in trace[:10]), label
        assert all(w.argmax == index for w in trace[10:]), label
        assert any(w.w[index] >= 0.8 for w in trace[:20]), label
        assert all(abs(w.w.sum() - 1.0) <= 1e-8 for w in trace)


def test_ensemble_follows_a_terrain_switch(suite, true_params):
    bank = suite['bank']
    first, second = bank.labels[0], bank.labels[1]
    ensemble = EnsembleGp(bank, true_params, DT, k=10, alpha=1e-3)
    ensemble.observe_many(_records(suite['test'][first])[:40])
    assert ensemble.weights.argmax == bank.index(first)
    trace = ensemble.observe_many(_records(suite['test'][second])[:20])
    assert any(w.argmax == bank.index(second) for w in trace)


def test_ensemble_reset_and_residual(small_bank, true_params):
    ensemble = EnsembleGp(small_bank, true_params, DT)
    ensemble.observe(HistoryRecord(np.array([0.2, 0.1, 1.0, 0.5]), 0.25, 0.12))
    assert ensemble.weights.timestamp == 1
    ensemble.reset()
    assert len(ensemble.history) == 0
    assert ensemble.weights.timestamp == 0
    residual = ensemble.residual([0.2, 0.1, 1.0, 0.5])
    means, _ = ensemble.residual_batch(np.array([[0.2, 0.1, 1.0, 0.5]]))
    np.testing.assert_allclose(residual.mean, means[0])


def test_bank_lookup(small_bank):
    assert small_bank.labels == ['asphalt', 'grass']
    assert small_bank.index('grass') == 1
    assert small_bank.index('ice') is None
    with pytest.raises(ValidationError):
        TerrainGpBank(())
    restored = TerrainGpBank.from_dict(small_bank.to_dict())
    assert restored.labels == small_bank.labels

