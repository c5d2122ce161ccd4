'''
Least-squares projection of a target treatment pmf onto the set reachable through instrument
policies: the risk sum_a w_a (g*(a) - (B h)(a))^2, its gradient, Euclidean projection onto the
probability simplex and projected gradient descent with step halving.

Also holds the Gaussian exponential-tilt policy used to check that a small location shift of
the instrument equals a tilt along its score to first order.
'''

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.integrate import quad
from scipy.stats import norm

from ivbench.enums import Defaults, Provenance
from ivbench.errors import ConvergenceError, ParseError, ValidationError
from ivbench.induced import BMatrix
from ivbench.tables import InducedMarginal, InstrumentPolicy, Strata


def _as_matrix(B) -> np.ndarray:
    matrix = B.matrix if isinstance(B, BMatrix) else np.asarray(B, dtype=float)
    if matrix.ndim != 2:
        raise ValidationError(f'B must be a 2-D array, got shape {matrix.shape}')
    return matrix


def _vectors(B, g_star, h, weights=None):
    M = _as_matrix(B)
    g_star = np.ravel(np.asarray(g_star, dtype=float))
    h = np.ravel(np.asarray(h, dtype=float))
    if g_star.shape != (M.shape[0],):
        raise ValidationError(f'g_star has {len(g_star)} entries for a B with {M.shape[0]} rows')
    if h.shape != (M.shape[1],):
        raise ValidationError(f'h has {len(h)} entries for a B with {M.shape[1]} columns')
    if weights is None:
        weights = np.ones(M.shape[0])
    else:
        weights = np.ravel(np.asarray(weights, dtype=float))
        if weights.shape != (M.shape[0],):
            raise ValidationError(f'weights have {len(weights)} entries for {M.shape[0]} treatment values')
        if np.any(weights < 0):
            raise ValidationError('weights must be non-negative')
    return M, g_star, h, weights


def ls_risk(B, g_star, h, weights=None) -> float:
    '''sum_a weights[a] * (g*[a] - (B h)[a])^2, with unit weights by default.'''
    M, g_star, h, weights = _vectors(B, g_star, h, weights)
    residual = g_star - M @ h
    return float(weights @ residual ** 2)


def descent_direction(B, g_star, h, weights=None) -> np.ndarray:
    '''Euclidean gradient of `ls_risk` in h: -2 B^T W (g* - B h).'''
    M, g_star, h, weights = _vectors(B, g_star, h, weights)
    return -2 * M.T @ (weights * (g_star - M @ h))


def canonical_gradient(B, g_star, h, weights=None) -> np.ndarray:
    '''-2 h * B^T W (g* - B h): the gradient reweighted by the current policy (elementwise).'''
    h = np.ravel(np.asarray(h, dtype=float))
    return h * descent_direction(B, g_star, h, weights)


def project_simplex(v) -> np.ndarray:
    '''
    Euclidean projection onto {x >= 0, sum x = 1} by sorting and thresholding.
    '''
    v = np.ravel(np.asarray(v, dtype=float))
    if len(v) == 0 or not np.all(np.isfinite(v)):
        raise ValidationError('Simplex projection needs a non-empty finite vector')
    u = np.sort(v, kind='stable')[::-1]
    css = np.cumsum(u)
    j = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - (css - 1) / j > 0)[-1]
    theta = (css[rho] - 1) / (rho + 1)
    return np.maximum(v - theta, 0.0)


def unconstrained_solution(B, g_star) -> np.ndarray:
    '''
    Solve the normal equations (B^T B) h = B^T g* over all of R^q (not restricted to the simplex).
    '''
    M = _as_matrix(B)
    g_star = np.ravel(np.asarray(g_star, dtype=float))
    if g_star.shape != (M.shape[0],):
        raise ValidationError(f'g_star has {len(g_star)} entries for a B with {M.shape[0]} rows')
    gram = M.T @ M
    if np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise ConvergenceError(
            'B^T B is singular: B is not injective, so the unconstrained solution is not unique '
            '(the simplex projection is still well-defined through ls_project)'
        )
    return np.linalg.solve(gram, M.T @ g_star)


@dataclass(frozen=True)
class PgdConfig:
    step: float = Defaults.PGD_STEP
    tol: float = Defaults.PGD_TOL
    max_iter: int = Defaults.PGD_MAX_ITER


@dataclass(frozen=True, eq=False)
class PgdState:
    h: np.ndarray
    risk_trace: np.ndarray = field(repr=False)
    step: float
    iterations: int
    converged: bool

    @property
    def risk(self) -> float:
        return float(self.risk_trace[-1])

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({'iteration': np.arange(len(self.risk_trace)), 'risk': self.risk_trace})


def ls_project(
    B,
    g_star,
    h0=None,
    step: float = Defaults.PGD_STEP,
    tol: float = Defaults.PGD_TOL,
    max_iter: int = Defaults.PGD_MAX_ITER,
    weights=None,
) -> tuple[PgdState, np.ndarray]:
    '''
    Projected gradient descent of `ls_risk` over the simplex.

    Arguments:
        B: BMatrix or (p, q) array.
        g_star: Target treatment pmf, length p.
        h0: Starting policy on the simplex (default uniform).
        step: Initial step size t; halved whenever a step would raise the risk.
        tol: Stop once ||h_{k+1} - h_k|| <= tol.
        max_iter: Iteration budget; running out sets `converged=False` and warns.
        weights: Per-treatment weights of the risk (default all ones).

    Returns the final state and the implied treatment pmf B h.
    '''
    M = _as_matrix(B)
    h = project_simplex(np.full(M.shape[1], 1 / M.shape[1])) if h0 is None else np.ravel(np.asarray(h0, dtype=float))
    M, g_star, h, weights = _vectors(M, g_star, h, weights)
    if np.any(h < 0) or abs(h.sum() - 1) > 1e-12:
        raise ValidationError(f'h0 must lie on the probability simplex, got {h.tolist()}')
    if not step > 0:
        raise ValidationError(f'step must be positive, got {step}')

    t = float(step)
    risk = ls_risk(M, g_star, h, weights)
    trace = [risk]
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        direction = descent_direction(M, g_star, h, weights)
        while True:
            candidate = project_simplex(h - t * direction)
            candidate_risk = ls_risk(M, g_star, candidate, weights)
            if candidate_risk <= risk:
                break
            t /= 2
            if t < step * 1e-12:
                candidate, candidate_risk = h, risk
                break
        change = float(np.linalg.norm(candidate - h))
        h, risk = candidate, candidate_risk
        trace.append(risk)
        if change <= tol:
            converged = True
            break

    if not converged:
        warnings.warn(f'Projected gradient descent stopped after {max_iter} iterations without reaching tol={tol}', RuntimeWarning)
    state = PgdState(h=h, risk_trace=np.asarray(trace), step=t, iterations=iterations, converged=converged)
    return state, M @ h


@dataclass(frozen=True, eq=False)
class StrataProjection:
    policy: InstrumentPolicy
    states: list[PgdState]
    implied: InducedMarginal

    @property
    def converged(self) -> bool:
        return all(s.converged for s in self.states)


def ls_project_strata(
    Bs: list,
    g_stars,
    support,
    strata: Strata | None = None,
    h0s=None,
    config: PgdConfig = PgdConfig(),
    weights=None,
    n_jobs: int = 1,
) -> StrataProjection:
    '''
    Run `ls_project` independently in every covariate stratum and collect the results as one
    tabular policy and one implied marginal.

    Arguments:
        Bs: One B per stratum (e.g. from build_B_matrices).
        g_stars: Target pmfs, shape (k, 2).
        support: Instrument values indexing the columns of every B.
        strata: Covariate strata in the order of Bs (None for a single stratum).
        h0s: Starting policies per stratum (default uniform).
        config: Step size, tolerance and iteration budget.
        weights: Per-stratum risk weights, shape (k, 2), e.g. P(A=a, W=w).
        n_jobs: joblib workers.
    '''
    k = len(Bs)
    g_stars = np.atleast_2d(np.asarray(g_stars, dtype=float))
    if g_stars.shape[0] != k:
        raise ValidationError(f'{g_stars.shape[0]} target rows for {k} strata')
    if strata is not None and strata.k != k:
        raise ValidationError(f'{strata.k} strata for {k} B matrices')
    h0s = [None] * k if h0s is None else list(h0s)
    weights = [None] * k if weights is None else list(np.atleast_2d(weights))
    results = Parallel(n_jobs=n_jobs)(
        delayed(ls_project)(Bs[i], g_stars[i], h0s[i], config.step, config.tol, config.max_iter, weights[i])
        for i in range(k)
    )
    states = [state for state, _ in results]
    table = np.vstack([state.h for state in states])
    implied = np.vstack([implied for _, implied in results])
    policy = InstrumentPolicy.tabular(strata, support, table)
    return StrataProjection(policy, states, InducedMarginal(implied, strata, provenance=Provenance.INDUCED))


def b_matrix_from_frame(frame: pd.DataFrame) -> tuple[np.ndarray, np.ndarray]:
    '''
    Parse a B-matrix table: an `a` column with the treatment value of each row and one column
    per instrument value, headed by that value. Returns (matrix, support).
    '''
    if 'a' not in frame.columns:
        raise ParseError('B matrix needs an a column', location='header')
    support = []
    for name in frame.columns:
        if name == 'a':
            continue
        try:
            support.append(float(name))
        except ValueError:
            raise ParseError(f'Column {name!r} is not an instrument value', location='header') from None
    if len(support) == 0:
        raise ParseError('B matrix has no instrument columns', location='header')
    frame = frame.sort_values('a', kind='stable')
    matrix = frame.drop(columns=['a']).to_numpy(dtype=float)
    bad = np.argwhere((matrix < 0) | (matrix > 1))
    if len(bad):
        row, col = bad[0]
        raise ParseError(f'B entry {matrix[row, col]:g} is not a probability', location=(int(frame.index[row]) + 2, frame.columns.drop('a')[col]))
    sums = matrix.sum(axis=0)
    off = np.flatnonzero(np.abs(sums - 1) > 1e-9)
    if len(off):
        raise ParseError(f'B column for z={support[off[0]]:g} sums to {sums[off[0]]:.12g}, not 1', location=(1, frame.columns.drop('a')[off[0]]))
    order = np.argsort(support)
    return matrix[:, order], np.asarray(support)[order]


### Exponential tilts

@dataclass(frozen=True)
class TiltPolicy:
    '''
    Gaussian natural instrument density h = N(mu, sigma^2) (per w when mu, sigma are arrays)
    together with a shift beta. The first-order tilt h exp(-beta * score) and the exactly
    shifted density h(z - beta) agree up to O(beta^2).
    '''

    beta: float | np.ndarray
    mu: float | np.ndarray
    sigma: float | np.ndarray

    def score(self, z) -> np.ndarray:
        '''d/dz log h(z) = -(z - mu) / sigma^2.'''
        return -(np.asarray(z, dtype=float) - self.mu) / self.sigma ** 2

    def natural_density(self, z) -> np.ndarray:
        return norm.pdf(z, self.mu, self.sigma)

    def first_order_ratio(self, z) -> np.ndarray:
        return np.exp(-self.beta * self.score(z))

    def first_order_density(self, z) -> np.ndarray:
        return self.natural_density(z) * self.first_order_ratio(z)

    def exact_ratio(self, z) -> np.ndarray:
        '''h(z - beta) / h(z) = exp(beta (z - mu) / sigma^2 - beta^2 / (2 sigma^2)).'''
        z = np.asarray(z, dtype=float)
        return np.exp(self.beta * (z - self.mu) / self.sigma ** 2 - self.beta ** 2 / (2 * self.sigma ** 2))

    def exact_density(self, z) -> np.ndarray:
        return norm.pdf(z, self.mu + self.beta, self.sigma)

    @property
    def normalizer(self):
        '''C with C * integral(h exp(-beta * score)) = 1; the normalized tilt is the exact shift.'''
        return np.exp(-np.asarray(self.beta) ** 2 / (2 * np.asarray(self.sigma) ** 2))

    def normalized_density(self, z) -> np.ndarray:
        return self.normalizer * self.first_order_density(z)

    def normalizer_quad(self) -> float:
        '''The normalizer by numerical integration (scalar parameters only).'''
        if np.ndim(self.beta) or np.ndim(self.mu) or np.ndim(self.sigma):
            raise ValidationError('Quadrature check needs scalar beta, mu and sigma')
        mass, _ = quad(lambda z: float(self.first_order_density(z)), -np.inf, np.inf)
        return 1 / mass

    def sup_gap(self, lo: float = -4.0, hi: float = 4.0, points: int = 8001) -> float:
        '''Largest |first-order tilt - exact shift| on a grid over [lo, hi].'''
        grid = np.linspace(lo, hi, points)
        return float(np.max(np.abs(self.first_order_density(grid) - self.exact_density(grid))))


def gaussian_tilt_policy(beta, mu, sigma) -> TiltPolicy:
    sigma = np.asarray(sigma, dtype=float)
    if np.any(~(sigma > 0)):
        raise ValidationError(f'sigma must be positive, got {sigma.tolist()}')
    as_param = lambda x: float(x) if np.ndim(x) == 0 else np.asarray(x, dtype=float)
    return TiltPolicy(as_param(beta), as_param(mu), as_param(sigma))
