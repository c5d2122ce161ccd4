import numpy as np
import pytest

from ivbench.nuisance import ConditionalKernel
from ivbench.npsem import NpsemSpec, simulate_natural, toy_policy, toy_spec
from ivbench.tables import Strata


@pytest.fixture
def toy() -> NpsemSpec:
    return toy_spec()


@pytest.fixture
def toy_kernel(toy) -> ConditionalKernel:
    return ConditionalKernel.from_table(toy.strata, toy.instrument_support, toy.treatment_kernel)


@pytest.fixture
def h_star():
    return toy_policy()


@pytest.fixture(scope='session')
def toy_data():
    return simulate_natural(toy_spec(), 10_000, seed=2024)


def random_binary_spec(rng: np.random.Generator, k: int = 3, min_gap: float = 0.1, randomized: bool = False) -> NpsemSpec:
    '''
    Binary Z and A with one covariate taking k values; |g1 - g0| >= min_gap in every stratum.
    With `randomized`, h(z|w) does not depend on w.
    '''
    g0 = rng.uniform(0.05, 0.95 - min_gap, size=k)
    g1 = g0 + rng.uniform(min_gap, 0.95 - g0)
    flip = rng.random(k) < 0.5
    g0[flip], g1[flip] = g1[flip], g0[flip].copy()
    h1 = np.full(k, rng.uniform(0.1, 0.9)) if randomized else rng.uniform(0.1, 0.9, size=k)
    return NpsemSpec(
        strata=Strata(np.arange(k, dtype=float).reshape(-1, 1)),
        covariate_pmf=rng.dirichlet(np.ones(k)),
        instrument_support=[0, 1],
        instrument_policy=np.column_stack([1 - h1, h1]),
        treatment_kernel=np.vstack([g0, g1]),
        alpha=rng.uniform(-2, 2),
        gamma=[rng.uniform(-1, 1)],
        delta=rng.uniform(-2, 2),
        noise_sd=0.1,
    )


@pytest.fixture
def binary_spec_factory():
    return random_binary_spec
