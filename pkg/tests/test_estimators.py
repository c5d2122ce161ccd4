import numpy as np
import pytest

from ivbench.enums import OutcomeKind
from ivbench.errors import CompatibilityError, PositivityError, ValidationError
from ivbench.estimators import (
    clever_weights,
    eic_values,
    gcomp_estimate,
    tmle_estimate,
    wald_contrast,
    wald_mean,
)
from ivbench.induced import induced_marginal
from ivbench.npsem import ObservedDataset, joint_table, population_truth
from ivbench.nuisance import (
    ConditionalKernel,
    InstrumentDensity,
    OutcomeRegression,
    fit_instrument_density,
    fit_outcome_regression,
)
from ivbench.tables import InducedMarginal, InstrumentPolicy


@pytest.fixture(scope='module')
def fitted(toy_data):
    return (
        fit_outcome_regression(toy_data),
        fit_outcome_regression(toy_data, kind=OutcomeKind.SATURATED),
        fit_instrument_density(toy_data),
    )


class TestPlugin:

    def test_identity_policy_gives_mean_outcome(self, toy_data, fitted):
        _, saturated, h_nat = fitted
        psi = gcomp_estimate(toy_data, saturated, h_nat.as_policy())
        assert psi == pytest.approx(toy_data.y.mean(), abs=1e-10)

    def test_misspecified_plugin_is_biased(self, toy_data, fitted, h_star):
        ols, _, _ = fitted
        # Population OLS of Y on (1, Z, W) gives 0.7969 under h*, far from 1.02
        assert gcomp_estimate(toy_data, ols, h_star) == pytest.approx(0.797, abs=0.03)

    def test_clever_weights(self, toy_data, fitted, h_star):
        _, _, h_nat = fitted
        H = clever_weights(toy_data, h_nat, h_star)
        # E[H | W] = 1 for any policy
        assert H.mean() == pytest.approx(1.0, abs=0.05)
        assert np.all(H > 0)


class TestTmle:

    def test_toy_estimate(self, toy_data, fitted, h_star):
        ols, _, h_nat = fitted
        est = tmle_estimate(toy_data, ols, h_nat, h_star)
        assert abs(est.psi - 1.02) < 3 * est.se
        assert est.se == pytest.approx(0.017, abs=0.005)
        assert abs(est.mean_eic) < 1e-8 * np.std(est.eic)
        assert est.covers(est.psi)

    def test_eic_matches_estimate(self, toy_data, fitted, h_star):
        ols, _, h_nat = fitted
        est = tmle_estimate(toy_data, ols, h_nat, h_star)
        assert est.n == toy_data.n
        assert est.se == pytest.approx(np.sqrt(np.var(est.eic) / toy_data.n))

    def test_identity_policy(self, toy_data, fitted):
        _, saturated, h_nat = fitted
        est = tmle_estimate(toy_data, saturated, h_nat, h_nat.as_policy())
        assert est.psi == pytest.approx(toy_data.y.mean(), abs=1e-6)

    def test_iterated_agrees(self, toy_data, fitted, h_star):
        ols, _, h_nat = fitted
        once = tmle_estimate(toy_data, ols, h_nat, h_star)
        iterated = tmle_estimate(toy_data, ols, h_nat, h_star, iterate=True)
        assert iterated.psi == pytest.approx(once.psi, abs=1e-6)

    def test_interval_levels(self, toy_data, fitted, h_star):
        ols, _, h_nat = fitted
        est = tmle_estimate(toy_data, ols, h_nat, h_star, alpha=0.05)
        lo, hi = est.ci
        assert hi - lo == pytest.approx(2 * 1.959964 * est.se, rel=1e-5)
        lo90, hi90 = est.interval(0.1)
        assert hi90 - lo90 < hi - lo
        assert est.to_dict()['alpha'] == 0.05

    def test_positivity(self, toy, toy_data, fitted, h_star):
        ols, _, _ = fitted
        h_nat = InstrumentDensity(toy.strata, [0, 1], [[1.0, 0.0], [0.2, 0.8]])
        with pytest.raises(PositivityError, match='z=1'):
            tmle_estimate(toy_data, ols, h_nat, h_star)

    def test_rejects_alpha(self, toy_data, fitted, h_star):
        ols, _, h_nat = fitted
        with pytest.raises(ValidationError, match='alpha'):
            tmle_estimate(toy_data, ols, h_nat, h_star, alpha=1.5)

    def test_saturated_regression_needs_no_fluctuation(self, toy_data, fitted, h_star):
        _, saturated, h_nat = fitted
        est = tmle_estimate(toy_data, saturated, h_nat, h_star)
        assert abs(est.psi - gcomp_estimate(toy_data, saturated, h_star)) < 1e-8

    @pytest.mark.parametrize('shift', [0.0, 0.3])
    def test_eic_has_mean_zero_at_truth(self, toy, h_star, shift):
        # One row per (w, z) cell with y = E[Y|z, w], weighted by P(w, z); with the true h the
        # mean is zero whether or not Q is right
        joint = joint_table(toy)
        k, q = joint.p_wz.shape
        w_idx, z_idx = (idx.ravel() for idx in np.meshgrid(np.arange(k), np.arange(q), indexing='ij'))
        cells = ObservedDataset(joint.strata.values[w_idx], joint.support[z_idx], np.zeros(k * q), joint.q_zw[z_idx, w_idx])
        q_reg = OutcomeRegression(OutcomeKind.SATURATED, (-1.0, 3.0), strata=joint.strata, support=joint.support, table=joint.q_zw + shift)
        h_true = InstrumentDensity(toy.strata, [0, 1], toy.instrument_policy)
        eic = eic_values(cells, q_reg, h_true, h_star, population_truth(toy, h_star))
        assert joint.p_wz[w_idx, z_idx] @ eic == pytest.approx(0.0, abs=1e-12)


class TestWald:

    @pytest.mark.parametrize('seed', range(20))
    def test_contrast_matches_truth(self, binary_spec_factory, seed):
        rng = np.random.default_rng(seed)
        spec = binary_spec_factory(rng, k=3)
        kernel = ConditionalKernel.from_table(spec.strata, spec.instrument_support, spec.treatment_kernel)
        h_star = InstrumentPolicy.binary(spec.strata, rng.uniform(size=3))
        f_star = InstrumentPolicy.binary(spec.strata, rng.uniform(size=3))
        q = joint_table(spec).q_zw
        contrast = wald_contrast(
            kernel, q, spec.covariate_pmf, induced_marginal(kernel, h_star), induced_marginal(kernel, f_star)
        )
        expected = population_truth(spec, h_star) - population_truth(spec, f_star)
        assert contrast == pytest.approx(expected, abs=1e-10)

    @pytest.mark.parametrize('seed', range(5))
    def test_level_form(self, binary_spec_factory, seed):
        rng = np.random.default_rng(50 + seed)
        spec = binary_spec_factory(rng, k=3)
        kernel = ConditionalKernel.from_table(spec.strata, spec.instrument_support, spec.treatment_kernel)
        h_star = InstrumentPolicy.binary(spec.strata, rng.uniform(size=3))
        value = wald_mean(kernel, joint_table(spec).q_zw, spec.covariate_pmf, induced_marginal(kernel, h_star))
        assert value == pytest.approx(population_truth(spec, h_star), abs=1e-10)

    def test_toy(self, toy, toy_kernel, h_star):
        q = joint_table(toy).q_zw
        g_star = induced_marginal(toy_kernel, h_star)
        g_nat = induced_marginal(toy_kernel, toy.natural_policy)
        assert wald_contrast(toy_kernel, q, toy.covariate_pmf, g_star, g_nat) == pytest.approx(1.02 - 0.724, abs=1e-12)
        assert wald_mean(toy_kernel, q, toy.covariate_pmf, g_star) == pytest.approx(1.02, abs=1e-12)

    def test_degenerate_stratum_contributes_zero(self, toy):
        kernel = ConditionalKernel.from_table(toy.strata, [0, 1], [[0.3, 0.5], [0.7, 0.5]])
        g_star = InducedMarginal.binary(toy.strata, [0.5, 0.5])
        f_star = InducedMarginal.binary(toy.strata, [0.3, 0.5])
        q = np.array([[0.0, 1.0], [1.0, 3.0]])
        assert wald_contrast(kernel, q, [0.7, 0.3], g_star, f_star) == pytest.approx(0.7 * 0.2 * 1.0 / 0.4)
        with pytest.raises(ValidationError, match='g0 = g1'):
            wald_mean(kernel, q, [0.7, 0.3], g_star)

    def test_incompatible_target(self, toy, toy_kernel, h_star):
        q = joint_table(toy).q_zw
        bad = InducedMarginal.binary(toy.strata, [0.9, 0.6])
        with pytest.raises(CompatibilityError):
            wald_contrast(toy_kernel, q, toy.covariate_pmf, bad, induced_marginal(toy_kernel, h_star))

    def test_outcome_regression_input(self, toy, toy_data, toy_kernel, h_star):
        saturated = fit_outcome_regression(toy_data, kind=OutcomeKind.SATURATED)
        value = wald_mean(toy_kernel, saturated, toy.covariate_pmf, induced_marginal(toy_kernel, h_star))
        assert value == pytest.approx(1.02, abs=0.05)

    def test_shape_check(self, toy, toy_kernel, h_star):
        g_star = induced_marginal(toy_kernel, h_star)
        with pytest.raises(ValidationError, match='shape'):
            wald_mean(toy_kernel, np.zeros((2, 3)), toy.covariate_pmf, g_star)
