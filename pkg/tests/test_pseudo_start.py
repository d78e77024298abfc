import numpy as np
import pytest

from mcfpolicy import DataError, SyntheticConfig, generate_synthetic
from mcfpolicy.dataset import MAX_START_DAY
from mcfpolicy.pseudo_start import (PostLassoModel, assign_pseudo_starts, exclusion_reasons,
                                    fit_lasso, fit_post_lasso, lasso_fit, penalty_grid,
                                    round_half_up, simulate_pseudo_starts)


def orthonormal_design(n, p, rng):
    """Centered columns with X'X / n = I (so standardization leaves them unchanged)."""
    Z = rng.standard_normal((n, p))
    Z -= Z.mean(axis=0)
    Q, _ = np.linalg.qr(Z)
    return Q * np.sqrt(n)


def test_orthonormal_design_soft_threshold(rng):
    n, p = 200, 4
    X = orthonormal_design(n, p, rng)
    y = X @ np.array([1.5, -0.7, 0.2, 0.0]) + rng.standard_normal(n)
    z = X.T @ (y - y.mean()) / n                  # least-squares coefficients
    for lam in rng.uniform(0, 2, 5):
        _, coef = lasso_fit(X, y, lam)
        oracle = np.where(np.abs(z) > lam, np.sign(z) * (np.abs(z) - lam), 0.0)
        np.testing.assert_allclose(coef, oracle, atol=1e-6)


def test_zero_penalty_is_least_squares(rng):
    X = rng.standard_normal((150, 5))
    y = X @ rng.standard_normal(5) + 0.3 * rng.standard_normal(150) + 2
    intercept, coef = lasso_fit(X, y, 0.0, tol=1e-12)
    A = np.column_stack([np.ones(150), X])
    ols = np.linalg.lstsq(A, y, rcond=None)[0]
    np.testing.assert_allclose(np.concatenate([[intercept], coef]), ols, atol=1e-6)
    assert np.all(coef != 0)


def test_grid_endpoints_and_monotone_active_set(rng):
    X = rng.standard_normal((300, 6))
    y = X[:, 0] - 0.5 * X[:, 1] + 0.2 * X[:, 2] + rng.standard_normal(300)
    grid = penalty_grid(X, y, 100)
    assert len(grid) == 100 and np.all(np.diff(grid) < 0)
    assert grid[-1] == pytest.approx(grid[0] * 1e-4)
    _, coef = lasso_fit(X, y, grid[0])
    assert np.all(coef == 0)
    _, coef = lasso_fit(X, y, grid[0] * 0.999)
    assert np.count_nonzero(coef) == 1
    sizes = [np.count_nonzero(lasso_fit(X, y, lam)[1]) for lam in grid[::-10]]
    assert sizes == sorted(sizes, reverse=True)


def test_cv_selects_minimum_with_ties_to_larger_penalty(rng):
    X = rng.standard_normal((200, 8))
    y = X[:, 0] + 0.5 * X[:, 3] + rng.standard_normal(200)
    fit = fit_lasso(X, y, folds=10, grid_size=40, seed=1)
    mean = fit.cv_mean
    assert mean[fit.selected_index] == mean.min()
    assert fit.selected_index == np.flatnonzero(mean == mean.min())[0]
    assert fit.selected_penalty in fit.penalties
    assert {0, 3} <= set(fit.active.tolist())


def test_fit_lasso_errors(rng):
    X = rng.standard_normal((50, 3))
    with pytest.raises(DataError, match="constant"):
        fit_lasso(X, np.ones(50))
    with pytest.raises(DataError, match="rank 0"):
        fit_lasso(np.ones((50, 3)), rng.standard_normal(50))
    with pytest.raises(DataError):
        fit_lasso(X[:10], rng.standard_normal(10), folds=10)


def _model(log_days, sigma=0.5):
    return PostLassoModel(["x0"], np.array([0]), log_days, np.array([0.0]),
                          np.array([0.1, 0.1]), sigma)


def test_exclusion_examples():
    res = simulate_pseudo_starts(_model(np.log(300)), np.zeros((1, 1)), [1000], sigma=0)
    assert res.start_day[0] == 300 and not res.kept[0]
    assert res.reason[0] == "beyond-9-months"
    res = simulate_pseudo_starts(_model(np.log(60)), np.zeros((1, 1)), [50], sigma=0)
    assert res.start_day[0] == 60 and res.reason[0] == "spell-ended-before-start"
    assert list(exclusion_reasons([300, 10], [100, 100])) == ["both", ""]


def test_simulation_invariants_and_determinism(rng):
    X = rng.standard_normal((500, 1))
    spells = rng.integers(20, 600, 500)
    a = simulate_pseudo_starts(_model(4.5), X, spells, seed=5)
    b = simulate_pseudo_starts(_model(4.5), X, spells, seed=5)
    np.testing.assert_array_equal(a.start_day, b.start_day)
    kept = a.kept
    assert np.all(a.start_day[kept] <= MAX_START_DAY)
    assert np.all(a.start_day[kept] <= spells[kept])
    assert np.all((a.start_day[~kept] > MAX_START_DAY) | (a.start_day[~kept] > spells[~kept]))
    counts = a.counts()
    assert counts["kept"] + counts["excluded"] == counts["input"] == 500
    # without the draw, starts are a function of the features only
    c = simulate_pseudo_starts(_model(4.5), X, spells, seed=1, sigma=0)
    d = simulate_pseudo_starts(_model(4.5), X, spells, seed=2, sigma=0)
    np.testing.assert_array_equal(c.start_day, d.start_day)


def test_round_half_up():
    np.testing.assert_array_equal(round_half_up([0.5, 1.5, 2.5, 2.49]), [1, 2, 3, 2])


def test_missing_selected_feature_rejected():
    with pytest.raises(DataError, match="missing"):
        _model(4.0).predict(np.array([[np.nan]]))


def test_post_lasso_model(rng):
    X = rng.standard_normal((100, 4))
    y = 1 + 2 * X[:, 1] + 0.1 * rng.standard_normal(100)
    m = fit_post_lasso(X, y, [1])
    assert len(m.coef) + 1 == len(m.std_errors) == 2
    assert m.sigma > 0 and m.coef[0] == pytest.approx(2, abs=0.05)
    rep = m.coefficient_report()
    assert list(rep["name"]) == ["Intercept", "x1"] and rep["stars"].iloc[1] == "***"


def test_assign_pseudo_starts_end_to_end():
    ds = generate_synthetic(SyntheticConfig(n=800, seed=2, shares=(0.2, 0.2, 0.2),
                                            pseudo_start=True))
    stage = assign_pseudo_starts(ds, seed=4, folds=5, grid_size=30)
    out = stage.dataset
    nop = out.treatment == 0
    assert np.all(out.is_pseudo_start == nop)
    assert np.all(out.start_day[nop] >= 1) and np.all(out.start_day[nop] <= MAX_START_DAY)
    assert np.all(out.start_day[nop] <= out.spell_length_days[nop])
    assert out.n == ds.n - int((~stage.result.kept).sum())
    again = assign_pseudo_starts(ds, seed=4, folds=5, grid_size=30).dataset
    np.testing.assert_array_equal(out.start_day, again.start_day)
