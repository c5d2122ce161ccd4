import numpy as np
import pytest

from ivbench.enums import Link
from ivbench.errors import ValidationError
from ivbench.hal import (
    build_basis,
    cross_validate_lambda,
    duplicate_for_fractional,
    fit_weighted_l1,
    lambda_grid,
    lambda_max,
)


class TestBasis:

    def test_one_dimension(self):
        W = np.array([0, 1, 2, 3, 4], dtype=float)
        basis = build_basis(W)
        assert basis.n_columns == 4
        X = basis.transform(np.array([0.0, 2.5, 4.0]))
        np.testing.assert_array_equal(X, [[0, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 1]])

    def test_constant_covariate_has_no_columns(self):
        basis = build_basis(np.ones((10, 1)))
        assert basis.n_columns == 0
        assert basis.transform(np.ones((3, 1))).shape == (3, 0)

    def test_no_covariates(self):
        basis = build_basis(np.zeros((10, 0)))
        assert basis.n_columns == 0

    def test_knot_thinning(self):
        W = np.linspace(0, 1, 200)
        basis = build_basis(W, max_knots_per_dim=10)
        assert len(basis.knots[0]) <= 10
        assert basis.n_columns <= 10

    def test_interactions(self):
        rng = np.random.default_rng(0)
        W = rng.integers(0, 3, size=(100, 2)).astype(float)
        basis = build_basis(W, max_degree=2)
        dims = {d for d, _ in basis.terms}
        assert (0,) in dims and (1,) in dims and (0, 1) in dims
        main_only = build_basis(W, max_degree=1)
        assert all(len(d) == 1 for d, _ in main_only.terms)

    def test_columns_unique(self):
        rng = np.random.default_rng(1)
        W = rng.integers(0, 2, size=(50, 3)).astype(float)
        X = build_basis(W, max_degree=3).transform(W)
        assert len({X[:, j].tobytes() for j in range(X.shape[1])}) == X.shape[1]

    def test_dimension_check(self):
        basis = build_basis(np.zeros((5, 2)) + np.arange(5)[:, None])
        with pytest.raises(ValidationError, match='2 covariates'):
            basis.transform(np.zeros((3, 1)))


class TestFit:

    def test_least_squares(self):
        x = np.array([0, 1] * 50, dtype=float)[:, None]
        y = 1 + 2 * x[:, 0]
        fit = fit_weighted_l1(x, y, lam=0.0, link=Link.IDENTITY)
        assert fit.intercept == pytest.approx(1.0, abs=1e-6)
        assert fit.coefficients[0] == pytest.approx(2.0, abs=1e-6)
        assert fit.converged

    def test_intercept_only_fractional_labels(self):
        tau = np.full(40, 0.3)
        fit = fit_weighted_l1(np.zeros((40, 0)), tau, lam=0.0)
        np.testing.assert_allclose(fit.predict(np.zeros((5, 0))), 0.3, atol=1e-6)

    def test_full_shrinkage(self):
        rng = np.random.default_rng(2)
        X = rng.integers(0, 2, size=(200, 5)).astype(float)
        y = rng.random(200)
        top = lambda_max(X, y)
        fit = fit_weighted_l1(X, y, lam=top * 1.01)
        np.testing.assert_array_equal(fit.coefficients, np.zeros(5))
        np.testing.assert_allclose(fit.predict(X), y.mean(), atol=1e-6)

    def test_objective_never_increases(self):
        rng = np.random.default_rng(3)
        X = rng.integers(0, 2, size=(300, 8)).astype(float)
        y = (rng.random(300) < 0.3 + 0.4 * X[:, 0]).astype(float)
        fit = fit_weighted_l1(X, y, lam=1.0)
        trace = fit.objective_trace
        assert np.all(np.diff(trace) <= 1e-9 * np.abs(trace[:-1]))

    def test_weights_equal_repetition(self):
        rng = np.random.default_rng(4)
        X = rng.integers(0, 2, size=(60, 3)).astype(float)
        y = (rng.random(60) < 0.5).astype(float)
        weighted = fit_weighted_l1(X, y, np.full(60, 2.0), lam=0.5)
        repeated = fit_weighted_l1(np.vstack([X, X]), np.concatenate([y, y]), lam=0.5)
        np.testing.assert_allclose(weighted.coefficients, repeated.coefficients, atol=1e-6)

    def test_warm_start_reaches_same_fit(self):
        rng = np.random.default_rng(5)
        X = rng.integers(0, 2, size=(200, 4)).astype(float)
        y = (rng.random(200) < 0.2 + 0.5 * X[:, 1]).astype(float)
        cold = fit_weighted_l1(X, y, lam=0.2)
        warm = fit_weighted_l1(X, y, lam=0.2, init=fit_weighted_l1(X, y, lam=2.0))
        np.testing.assert_allclose(cold.predict(X), warm.predict(X), atol=1e-5)

    @pytest.mark.parametrize('bad', [
        dict(weights=-np.ones(4)),
        dict(lam=-1.0),
        dict(y=np.array([0, 1, 2, 1.0])),
    ])
    def test_validation(self, bad):
        kwargs = dict(X=np.eye(4), y=np.array([0, 1, 0, 1.0]))
        kwargs.update(bad)
        with pytest.raises(ValidationError):
            fit_weighted_l1(**kwargs)


class TestFractional:

    def test_layout(self):
        X = np.array([[1.0], [0.0]])
        X2, y2, w2 = duplicate_for_fractional(X, [0.25, 0.9])
        np.testing.assert_array_equal(X2[:, 0], [1, 1, 0, 0])
        np.testing.assert_array_equal(y2, [1, 0, 1, 0])
        np.testing.assert_allclose(w2, [0.25, 0.75, 0.9, 0.1])

    def test_same_fit_as_soft_labels(self):
        rng = np.random.default_rng(6)
        X = rng.integers(0, 2, size=(100, 3)).astype(float)
        tau = rng.random(100)
        soft = fit_weighted_l1(X, tau, lam=0.3)
        hard = fit_weighted_l1(*duplicate_for_fractional(X, tau), lam=0.3)
        np.testing.assert_allclose(soft.predict(X), hard.predict(X), atol=1e-5)

    def test_rejects_out_of_range(self):
        with pytest.raises(ValidationError, match='tau'):
            duplicate_for_fractional(np.zeros((2, 1)), [0.5, 1.5])


class TestCrossValidation:

    def _problem(self):
        rng = np.random.default_rng(7)
        X = rng.integers(0, 2, size=(200, 6)).astype(float)
        y = (rng.random(200) < 0.2 + 0.6 * X[:, 0]).astype(float)
        return X, y

    def test_picks_from_grid(self):
        X, y = self._problem()
        grid = lambda_grid(X, y, size=8)
        lam = cross_validate_lambda(X, y, grid=grid, seed=3)
        assert lam in grid

    def test_deterministic(self):
        X, y = self._problem()
        assert cross_validate_lambda(X, y, seed=11) == cross_validate_lambda(X, y, seed=11)

    def test_single_value_grid(self):
        X, y = self._problem()
        assert cross_validate_lambda(X, y, grid=[0.5]) == 0.5

    def test_too_many_folds(self):
        X, y = self._problem()
        with pytest.raises(ValidationError, match='folds'):
            cross_validate_lambda(X[:3], y[:3], folds=5, grid=[0.1, 1.0])


def test_fit_serializes():
    fit = fit_weighted_l1(np.eye(3), np.array([0.0, 1.0, 1.0]), lam=0.1)
    out = fit.to_dict()
    assert out['link'] == 'logit'
    assert len(out['coefficients']) == 3
