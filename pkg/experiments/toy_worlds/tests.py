import numpy as np
import pytest

from ivbench.enums import OutcomeMode
from ivbench.induced import induced_marginal
from ivbench.npsem import (
    population_truth,
    simulate_independent_policy,
    simulate_instrument_intervention,
    simulate_natural,
    toy_policy,
    toy_spec,
)
from ivbench.nuisance import ConditionalKernel


def _target(spec):
    kernel = ConditionalKernel.from_table(spec.strata, spec.instrument_support, spec.treatment_kernel)
    return induced_marginal(kernel, toy_policy())


def _assert_mean(y, value, sds=4.0):
    se = y.std(ddof=1) / np.sqrt(len(y))
    assert abs(y.mean() - value) < sds * se


def test_exact_values():
    spec = toy_spec()
    assert population_truth(spec, toy_policy()) == pytest.approx(1.02, abs=1e-12)
    assert population_truth(spec, spec.natural_policy) == pytest.approx(0.724, abs=1e-12)


@pytest.mark.parametrize('n, seed', [(200_000, 1), pytest.param(1_000_000, 0, marks=pytest.mark.slow)])
def test_additive_worlds(n, seed):
    spec = toy_spec()
    _assert_mean(simulate_natural(spec, n, seed).y, 0.724)
    _assert_mean(simulate_instrument_intervention(spec, toy_policy(), n, seed).y_star, 1.02)
    _assert_mean(simulate_independent_policy(spec, _target(spec), n, seed).y_star, 1.02)


@pytest.mark.slow
def test_recorded_monte_carlo_means():
    # Reference means from a 10^6-draw run; they carry their own Monte Carlo error
    spec = toy_spec()
    n = 1_000_000
    assert simulate_instrument_intervention(spec, toy_policy(), n, 0).y_star.mean() == pytest.approx(1.0203, abs=0.005)
    assert simulate_independent_policy(spec, _target(spec), n, 0).y_star.mean() == pytest.approx(1.0189, abs=0.005)
    assert simulate_natural(spec, n, 0).y.mean() == pytest.approx(0.7248, abs=0.005)


def test_multiplicative_worlds_separate():
    spec = toy_spec(OutcomeMode.MULTIPLICATIVE_CONFOUNDING)
    target = _target(spec)
    intervened = simulate_instrument_intervention(spec, toy_policy(), 200_000, 3).y_star
    independent = simulate_independent_policy(spec, target, 200_000, 3).y_star
    _assert_mean(intervened, population_truth(spec, toy_policy()))
    gap = intervened.mean() - independent.mean()
    se = np.sqrt(intervened.var() / len(intervened) + independent.var() / len(independent))
    assert abs(gap) > 4 * se
