import warnings

import numpy as np
import pytest

from ivbench.kl_projection import EmConfig, GaussianTreatmentWorld, TreatmentTarget, kl_project, monte_carlo_kl


def _kl_pair(n: int, config: EmConfig) -> tuple[float, float]:
    world = GaussianTreatmentWorld()
    W = world.sample_covariates(n, config.seed, stream=1)
    target = TreatmentTarget.gaussian(1.0, 0.5)
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', RuntimeWarning)
        result = kl_project(target, world, W, config)
    trace = result.state.loglik_trace
    assert np.all(np.diff(trace) >= -1e-8)
    projected = monte_carlo_kl(target, world, result.policy.p1(W), W, result.a_star)
    natural = monte_carlo_kl(target, world, world.natural_p1(W), W, result.a_star)
    return projected, natural


def test_projection_beats_natural_policy():
    projected, natural = _kl_pair(500, EmConfig(lam=0.01, max_iter=100, max_knots_per_dim=10, seed=0))
    assert projected < natural


@pytest.mark.slow
def test_cross_validated_projection():
    projected, natural = _kl_pair(500, EmConfig(seed=0))
    assert projected < natural
