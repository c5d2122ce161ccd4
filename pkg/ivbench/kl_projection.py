'''
KL projection of a desired treatment distribution onto the set of distributions reachable
by intervening on a binary instrument. The instrument is treated as missing data and the
policy h(1|W) is fitted by EM with a HAL-logistic M-step (fixed penalty).
'''

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import rel_entr
from scipy.stats import norm
from tqdm import tqdm

from ivbench.enums import Defaults, Link, TargetKind
from ivbench.errors import InvariantError, UnsupportedError, ValidationError
from ivbench.hal import HalBasis, HalFit, build_basis, cross_validate_lambda, duplicate_for_fractional, fit_weighted_l1
from ivbench.tables import InducedMarginal, InstrumentPolicy
from ivbench.utils import as_covariates, expit, make_rng


@dataclass(frozen=True, eq=False)
class TreatmentTarget:
    '''
    Desired treatment distribution g*(A|W): binary with P(A=1|w) given per stratum (or one
    scalar for every w), or an unconditional Gaussian N(mu, sigma^2).
    '''

    kind: TargetKind
    p1: InducedMarginal | float | None = None
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, 'kind', TargetKind(self.kind))
        if self.kind == TargetKind.BINARY:
            if isinstance(self.p1, InducedMarginal):
                return
            if self.p1 is None or not 0 <= float(self.p1) <= 1:
                raise ValidationError(f'Binary target probability must lie in [0, 1], got {self.p1}')
            object.__setattr__(self, 'p1', float(self.p1))
        elif not self.sigma > 0:
            raise ValidationError(f'Gaussian target needs sigma > 0, got {self.sigma}')

    @classmethod
    def binary(cls, p1: InducedMarginal | float) -> TreatmentTarget:
        return cls(TargetKind.BINARY, p1=p1)

    @classmethod
    def gaussian(cls, mu: float, sigma: float) -> TreatmentTarget:
        return cls(TargetKind.GAUSSIAN, mu=float(mu), sigma=float(sigma))

    def p1_at(self, W) -> np.ndarray:
        if self.kind != TargetKind.BINARY:
            raise UnsupportedError('A Gaussian target has no P(A=1|W)')
        if isinstance(self.p1, InducedMarginal):
            return self.p1.p1_at(W)
        return np.full(as_covariates(W).shape[0], self.p1)

    def density(self, a, W) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        if self.kind == TargetKind.GAUSSIAN:
            return norm.pdf(a, self.mu, self.sigma)
        p1 = self.p1_at(W)
        return np.where(a == 1, p1, 1 - p1)

    def sample(self, W, rng: np.random.Generator) -> np.ndarray:
        n = as_covariates(W).shape[0]
        if self.kind == TargetKind.GAUSSIAN:
            return self.mu + self.sigma * rng.standard_normal(n)
        return (rng.random(n) < self.p1_at(W)).astype(float)


@dataclass(frozen=True)
class GaussianTreatmentWorld:
    '''
    Continuous-covariate model with a binary instrument and a Gaussian treatment:
    W ~ Uniform([-2, 2]^2), Z ~ Bernoulli(expit(W1 sqrt|W2| sign W2)),
    A | Z, W ~ N(gamma Z + sin(W1) log(1 + W2^2), sigma^2).
    '''

    gamma: float = 2.0
    sigma: float = 0.2

    @staticmethod
    def instrument_index(W) -> np.ndarray:
        W = as_covariates(W)
        return W[:, 0] * np.sqrt(np.abs(W[:, 1])) * np.sign(W[:, 1])

    @staticmethod
    def treatment_shift(W) -> np.ndarray:
        W = as_covariates(W)
        return np.sin(W[:, 0]) * np.log1p(W[:, 1] ** 2)

    def natural_p1(self, W) -> np.ndarray:
        return expit(self.instrument_index(W))

    def density(self, a, z, W) -> np.ndarray:
        '''p(a|z, w), the known treatment density.'''
        mean = self.gamma * np.asarray(z, dtype=float) + self.treatment_shift(W)
        return norm.pdf(a, mean, self.sigma)

    def sample_covariates(self, n: int, seed: int, stream: int = 0) -> np.ndarray:
        return make_rng(seed, stream).uniform(-2, 2, size=(n, 2))

    def sample(self, n: int, seed: int, stream: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        '''(W, Z, A) from the natural world.'''
        rng = make_rng(seed, stream)
        W = rng.uniform(-2, 2, size=(n, 2))
        Z = (rng.random(n) < self.natural_p1(W)).astype(float)
        A = self.gamma * Z + self.treatment_shift(W) + self.sigma * rng.standard_normal(n)
        return W, Z, A


@dataclass(frozen=True)
class EmConfig:
    lam: float | None = None
    max_iter: int = Defaults.EM_MAX_ITER
    tol: float = Defaults.EM_TOL
    seed: int = 0
    max_degree: int = 2
    max_knots_per_dim: int = Defaults.MAX_KNOTS_PER_DIM
    cv_folds: int = Defaults.CV_FOLDS
    lambda_grid: tuple[float, ...] | None = None
    verbose: bool = False


@dataclass(frozen=True, eq=False)
class EmState:
    beta: np.ndarray
    intercept: float
    tau: np.ndarray
    loglik_trace: np.ndarray
    iterations: int
    converged: bool
    lam: float

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'iteration': np.arange(len(self.loglik_trace)), 'penalized_loglik': self.loglik_trace})


@dataclass(frozen=True, eq=False)
class KlProjection:
    policy: InstrumentPolicy
    state: EmState
    a_star: np.ndarray = field(repr=False)
    implied: pd.DataFrame = field(repr=False)


def sample_pseudo_treatments(target: TreatmentTarget, W, seed: int) -> np.ndarray:
    '''One A*_i ~ g*(.|W_i) per row; deterministic given seed.'''
    return target.sample(W, make_rng(seed, 0))


def _policy_p1(h_k, W) -> np.ndarray:
    if isinstance(h_k, InstrumentPolicy):
        return h_k.p1(W)
    p1 = np.asarray(h_k, dtype=float)
    return np.broadcast_to(p1, (as_covariates(W).shape[0],)).astype(float)


def _component_densities(kernel, a_star, W) -> tuple[np.ndarray, np.ndarray]:
    n = len(a_star)
    return kernel.density(a_star, np.zeros(n), W), kernel.density(a_star, np.ones(n), W)


def _posterior(p1: np.ndarray, f0: np.ndarray, f1: np.ndarray) -> np.ndarray:
    denom = f0 * (1 - p1) + f1 * p1
    bad = np.flatnonzero(~(denom > 0))
    if len(bad):
        raise ValidationError(f'E-step denominator is zero at row {int(bad[0])}: the pseudo-treatment is impossible under both instrument values')
    return np.clip(f1 * p1 / denom, 0.0, 1.0)


def em_e_step(h_k, kernel, a_star, W) -> np.ndarray:
    '''
    tau_i = p(A*_i|1, W_i) h_k(1|W_i) / [p(A*_i|0, W_i)(1 - h_k(1|W_i)) + p(A*_i|1, W_i) h_k(1|W_i)].

    Arguments:
        h_k: Current policy (InstrumentPolicy) or its h_k(1|W_i) values.
        kernel: Anything with density(a, z, W).
        a_star: Pseudo-treatments.
        W: Covariates.
    '''
    f0, f1 = _component_densities(kernel, np.asarray(a_star, dtype=float), W)
    return _posterior(_policy_p1(h_k, W), f0, f1)


def em_m_step(tau, X, lam: float, init: HalFit | None = None) -> HalFit:
    '''
    Maximize sum_i [tau_i log pi_i + (1 - tau_i) log(1 - pi_i)] - lam ||beta||_1 over the
    logistic model on basis matrix X, by fitting the duplicated hard-label data.
    '''
    X2, y2, w2 = duplicate_for_fractional(X, tau)
    return fit_weighted_l1(X2, y2, w2, lam, Link.LOGIT, init=init)


def penalized_loglik(p1, f0, f1, fit: HalFit | None) -> float:
    '''sum_i log(h(0|W_i) p(A*_i|0, W_i) + h(1|W_i) p(A*_i|1, W_i)) - lam ||beta||_1.'''
    mix = (1 - p1) * f0 + p1 * f1
    penalty = 0.0 if fit is None else fit.lam * fit.l1_norm
    return float(np.sum(np.log(mix)) - penalty)


def implied_density(kernel, p1, W, grid) -> np.ndarray:
    '''Density of A under policy p1, averaged over the rows of W, on `grid`.'''
    W = as_covariates(W)
    out = np.empty(len(grid))
    zeros, ones = np.zeros(len(W)), np.ones(len(W))
    for i, a in enumerate(grid):
        a_col = np.full(len(W), a)
        out[i] = np.mean((1 - p1) * kernel.density(a_col, zeros, W) + p1 * kernel.density(a_col, ones, W))
    return out


def binary_kl(g_star_p1, g_p1) -> float:
    '''Mean over rows of KL(Bernoulli(g*) || Bernoulli(g)).'''
    g_star_p1 = np.asarray(g_star_p1, dtype=float)
    g_p1 = np.asarray(g_p1, dtype=float)
    kl = rel_entr(g_star_p1, g_p1) + rel_entr(1 - g_star_p1, 1 - g_p1)
    return float(np.mean(kl))


def monte_carlo_kl(target: TreatmentTarget, kernel, p1, W, a_star) -> float:
    '''Monte Carlo KL(g* || g(h)) from pseudo-treatments a_star ~ g*(.|W).'''
    f0, f1 = _component_densities(kernel, np.asarray(a_star, dtype=float), W)
    mix = (1 - p1) * f0 + p1 * f1
    return float(np.mean(np.log(target.density(a_star, W)) - np.log(mix)))


def kl_project(target: TreatmentTarget, kernel, W, config: EmConfig = EmConfig()) -> KlProjection:
    '''
    EM for the instrument policy whose induced treatment distribution is KL-closest to the
    target.

    Arguments:
        target: Desired treatment distribution.
        kernel: Treatment density p(a|z, w) for z in {0, 1} (a fitted kernel or a known density).
        W: Covariates, shape (n, d).
        config: EM options; `config.lam=None` selects the penalty once by cross-validation
            on the first posteriors.
    '''
    support = getattr(kernel, 'support', None)
    if support is not None and not np.array_equal(np.ravel(support), [0, 1]):
        raise UnsupportedError('The EM projection needs a binary instrument on {0, 1}')
    W = as_covariates(W)
    a_star = sample_pseudo_treatments(target, W, config.seed)
    f0, f1 = _component_densities(kernel, a_star, W)

    basis: HalBasis = build_basis(W, config.max_degree, config.max_knots_per_dim)
    X = basis.transform(W)
    p1 = np.full(len(W), Defaults.EM_INIT)
    tau = _posterior(p1, f0, f1)

    if config.lam is not None:
        lam = float(config.lam)
    elif X.shape[1] == 0:
        lam = 0.0
    else:
        grid = list(config.lambda_grid) if config.lambda_grid else None
        lam = cross_validate_lambda(X, tau, None, config.cv_folds, grid, Link.LOGIT, config.seed)

    trace = [penalized_loglik(p1, f0, f1, None)]
    fit = None
    converged = False
    iterations = range(config.max_iter)
    if config.verbose:
        iterations = tqdm(iterations, desc='EM')
    for _ in iterations:
        fit = em_m_step(tau, X, lam, init=fit)
        p1 = fit.predict(X)
        value = penalized_loglik(p1, f0, f1, fit)
        previous = trace[-1]
        if value < previous - Defaults.ASCENT_TOL:
            raise InvariantError(f'EM ascent violated: penalized log-likelihood fell from {previous:.12g} to {value:.12g}')
        trace.append(value)
        tau = _posterior(p1, f0, f1)
        if abs(value - previous) < config.tol:
            converged = True
            break

    if fit is None:
        fit = em_m_step(tau, X, lam)
        p1 = fit.predict(X)
        tau = _posterior(p1, f0, f1)
    if not converged:
        warnings.warn(f'EM stopped after {config.max_iter} iterations without reaching tol={config.tol}', RuntimeWarning)

    state = EmState(
        beta=fit.coefficients,
        intercept=fit.intercept,
        tau=tau,
        loglik_trace=np.asarray(trace),
        iterations=len(trace) - 1,
        converged=converged,
        lam=lam,
    )
    policy = InstrumentPolicy.basis_logistic(basis, fit)
    if target.kind == TargetKind.BINARY:
        g1 = kernel.density(np.ones(len(W)), np.ones(len(W)), W)
        g0 = kernel.density(np.ones(len(W)), np.zeros(len(W)), W)
        implied = pd.DataFrame({'row': np.arange(len(W)), 'h1': p1, 'p1_implied': (1 - p1) * g0 + p1 * g1, 'p1_target': target.p1_at(W)})
    else:
        grid = np.linspace(target.mu - 5 * target.sigma, target.mu + 5 * target.sigma, 201)
        implied = pd.DataFrame({'a': grid, 'implied_density': implied_density(kernel, p1, W, grid), 'target_density': target.density(grid, W[:1])})
    return KlProjection(policy, state, a_star, implied)
