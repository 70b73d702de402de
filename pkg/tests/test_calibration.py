import numpy as np
import pytest
from scipy import optimize

from tools.calibration.raking import CalibrationProblem, rake, raking_variance
from tools.common.errors import CalibrationError, DimensionError
from tools.glm.glm_engine import fit_glm


def _problem(n=600, seed=9):
    gen = np.random.default_rng(seed)
    z = gen.standard_normal(n)
    selected = gen.random(n) < 0.35 + 0.3 * (z > 0)
    pi = np.where(z > 0, 0.65, 0.35)
    aux = np.column_stack([np.ones(n), z, z ** 2 - 1.0])
    return CalibrationProblem(1.0 / pi, aux, selected), z


def test_rake_hits_population_totals():
    problem, _ = _problem()
    result = rake(problem)
    assert result.converged
    achieved = problem.aux_selected.T @ result.final_weights(problem.base_weights)
    np.testing.assert_allclose(achieved, problem.totals, atol=1e-6)
    assert np.all(result.multipliers > 0)


def test_rake_matches_independent_dual_minimizer():
    problem, _ = _problem(n=400, seed=2)
    H, d, T = problem.aux_selected, problem.base_weights, problem.totals

    def objective(lam):
        return np.sum(d * np.exp(H @ lam)) - lam @ T

    def gradient(lam):
        return H.T @ (d * np.exp(H @ lam)) - T

    reference = optimize.minimize(objective, np.zeros(H.shape[1]), jac=gradient, method="BFGS",
                                  options={"gtol": 1e-10})
    result = rake(problem)
    np.testing.assert_allclose(result.lambda_, reference.x, atol=1e-5)


def test_dual_objective_never_increases():
    problem, _ = _problem(seed=4)
    trace = rake(problem).objective_trace
    assert all(b <= a + 1e-12 for a, b in zip(trace, trace[1:]))


def test_zero_auxiliaries_leave_weights_unchanged():
    selected = np.array([1, 0, 1, 1, 0], dtype=bool)
    result = rake(CalibrationProblem(np.full(3, 2.0), np.zeros((5, 1)), selected))
    assert result.converged
    np.testing.assert_array_equal(result.multipliers, np.ones(3))


def test_base_weights_may_be_given_for_the_full_sample():
    problem, _ = _problem()
    full = np.full(problem.selected.shape[0], 2.0)
    again = CalibrationProblem(full, problem.aux_full, problem.selected)
    assert again.base_weights.shape[0] == int(problem.selected.sum())


def test_too_few_complete_cases_is_not_converged():
    aux = np.column_stack([np.ones(4), np.arange(4.0)])
    selected = np.array([True, False, False, False])
    result = rake(CalibrationProblem(np.ones(1), aux, selected))
    assert not result.converged


def test_invalid_inputs():
    aux = np.ones((4, 1))
    with pytest.raises(DimensionError):
        CalibrationProblem(np.ones(2), aux, np.array([True, True, False]))
    with pytest.raises(CalibrationError):
        CalibrationProblem(-np.ones(2), aux, np.array([True, True, False, False]))
    with pytest.raises(DimensionError):
        CalibrationProblem(np.ones(3), aux, np.array([True, True, False, False]))


def test_raking_variance_without_auxiliaries_is_weighted_sandwich():
    gen = np.random.default_rng(1)
    n = 300
    X = np.column_stack([np.ones(n), gen.standard_normal(n)])
    y = (gen.random(n) < 1.0 / (1.0 + np.exp(-(X @ [-0.5, 1.0])))).astype(float)
    b = 1.0 + gen.random(n)
    fit = fit_glm(X, y, b, sandwich=True)
    calibrated = rake(CalibrationProblem(b, np.zeros((n, 1)), np.ones(n, dtype=bool)))
    variance = raking_variance(fit, calibrated, np.zeros((n, 1)), b, X, y)
    np.testing.assert_allclose(variance.covariance, fit.covariance, rtol=1e-8)
