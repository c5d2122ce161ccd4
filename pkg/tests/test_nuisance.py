import numpy as np
import pytest

from ivbench.enums import KernelKind, OutcomeKind
from ivbench.errors import PositivityError, ValidationError
from ivbench.npsem import ObservedDataset
from ivbench.nuisance import (
    ConditionalKernel,
    InstrumentDensity,
    fit_instrument_density,
    fit_outcome_regression,
    fit_treatment_kernel,
    observed_marginal,
)
from ivbench.tables import Strata


def _tiny_dataset():
    # No rows with (z=1, w=1)
    return ObservedDataset(
        w=np.array([[0.0], [0.0], [1.0], [0.0], [1.0]]),
        z=np.array([0.0, 1.0, 0.0, 1.0, 0.0]),
        a=np.array([0.0, 1.0, 1.0, 0.0, 1.0]),
        y=np.array([0.1, 1.2, 2.0, 0.4, 1.8]),
    )


class TestTreatmentKernel:

    def test_tabular_recovers_truth(self, toy, toy_data):
        kernel = fit_treatment_kernel(toy_data)
        assert kernel.kind == KernelKind.TABULAR
        np.testing.assert_allclose(kernel.table, toy.treatment_kernel, atol=0.04)

    def test_empty_cell(self):
        with pytest.raises(ValidationError, match='Empty stratum'):
            fit_treatment_kernel(_tiny_dataset())

    def test_hal_without_penalty_matches_frequencies(self, toy_data):
        tabular = fit_treatment_kernel(toy_data)
        hal = fit_treatment_kernel(toy_data, kind=KernelKind.HAL, lam=0.0)
        strata = toy_data.strata()
        np.testing.assert_allclose(hal.table_for(strata), tabular.table_for(strata), atol=1e-3)

    def test_prob_and_g(self, toy_kernel):
        W = np.array([[0.0], [1.0]])
        np.testing.assert_allclose(toy_kernel.prob([1, 0], [1, 1], W), [0.7, 0.5])
        np.testing.assert_allclose(toy_kernel.g(), [[0.3, 0.7], [0.8, 0.5]])

    def test_unknown_instrument_value(self, toy_kernel):
        with pytest.raises(ValidationError, match='outside the fitted support'):
            toy_kernel.p1([2.0], np.array([[0.0]]))

    def test_table_range(self):
        with pytest.raises(ValidationError, match=r'\[0, 1\]'):
            ConditionalKernel.from_table(Strata([[0.0]]), [0, 1], [[0.5], [1.5]])


class TestOutcomeRegression:

    def test_ols(self, toy_data):
        reg = fit_outcome_regression(toy_data)
        assert reg.kind == OutcomeKind.OLS_MAIN_EFFECTS
        assert reg.coefficients.shape == (3,)
        assert reg.bounds == (toy_data.y.min(), toy_data.y.max())
        # Population OLS of Y on (1, Z, W) in the toy model
        np.testing.assert_allclose(reg.coefficients, [0.2034, 0.4554, 1.0524], atol=0.05)

    def test_saturated_matches_cell_means(self, toy, toy_data):
        reg = fit_outcome_regression(toy_data, kind=OutcomeKind.SATURATED)
        W = np.array([[0.0], [1.0]])
        np.testing.assert_allclose(reg.predict(0, W), [0.1, 2.1], atol=0.05)
        np.testing.assert_allclose(reg.predict(1, W), [0.9, 1.5], atol=0.05)

    def test_saturated_empty_cell(self):
        reg = fit_outcome_regression(_tiny_dataset(), kind=OutcomeKind.SATURATED)
        with pytest.raises(PositivityError, match='z=1'):
            reg.predict(1, np.array([[1.0]]))

    def test_singular_design(self):
        data = ObservedDataset(np.ones((6, 1)), [0, 1, 0, 1, 0, 1], [0, 1, 0, 1, 1, 0], np.arange(6.0))
        with pytest.raises(ValidationError, match='Singular'):
            fit_outcome_regression(data)

    def test_hal_outcome(self, toy_data):
        reg = fit_outcome_regression(toy_data, kind=OutcomeKind.HAL, lam=0.0)
        W = np.array([[0.0], [1.0]])
        np.testing.assert_allclose(reg.predict(1, W), [0.9, 1.5], atol=0.05)


class TestInstrumentDensity:

    def test_rows(self, toy_data):
        density = fit_instrument_density(toy_data)
        np.testing.assert_allclose(density.table.sum(axis=1), 1.0)
        np.testing.assert_allclose(density.table[:, 1], [0.3, 0.8], atol=0.03)

    def test_prob(self):
        density = InstrumentDensity(Strata([[0.0], [1.0]]), [0, 1], [[0.7, 0.3], [0.2, 0.8]])
        np.testing.assert_allclose(density.prob([1, 0], np.array([[0.0], [1.0]])), [0.3, 0.2])
        assert density.as_policy().is_tabular

    def test_row_sum(self):
        with pytest.raises(ValidationError, match='sums to'):
            InstrumentDensity(Strata([[0.0]]), [0, 1], [[0.7, 0.2]])

    def test_observed_marginal(self, toy_data):
        marginal = observed_marginal(toy_data)
        np.testing.assert_allclose(marginal.p1, [0.42, 0.56], atol=0.03)
