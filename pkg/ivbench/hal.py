'''
Highly Adaptive Lasso: indicator-basis expansion of covariates and a weighted L1-penalized
linear/logistic fitter based on cyclic coordinate descent.

Objectives are sum-scaled (not averaged over rows):

    identity:  1/2 * sum_i w_i (y_i - eta_i)^2          + lam * ||beta||_1
    logit:     sum_i w_i [log(1 + e^eta_i) - y_i eta_i]  + lam * ||beta||_1

with eta = intercept + X @ beta. The intercept is never penalized and labels for the logit
link may be fractional.
'''

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np
from sklearn.model_selection import KFold

from ivbench.enums import Defaults, Link
from ivbench.errors import ValidationError
from ivbench.utils import as_covariates, expit, logit

Term = tuple[tuple[int, ...], tuple[float, ...]]  # (dimensions, cut points)


@dataclass(frozen=True, eq=False)
class HalBasis:
    knots: tuple[np.ndarray, ...]
    terms: tuple[Term, ...]
    max_degree: int
    n_dims: int

    @property
    def n_columns(self) -> int:
        return len(self.terms)

    def transform(self, W) -> np.ndarray:
        '''
        Evaluate every indicator column at the rows of W. Returns a float (n, n_columns) array of 0/1.
        '''
        W = as_covariates(W)
        if W.shape[1] != self.n_dims:
            raise ValidationError(f'Basis was built on {self.n_dims} covariates, got {W.shape[1]}')
        X = np.empty((W.shape[0], self.n_columns), dtype=float)
        for j, (dims, cuts) in enumerate(self.terms):
            X[:, j] = np.all(W[:, dims] >= np.asarray(cuts), axis=1)
        return X

    def describe(self) -> dict:
        return {
            'n_dims': self.n_dims,
            'max_degree': self.max_degree,
            'knots': [k.tolist() for k in self.knots],
            'terms': [{'dims': list(d), 'cuts': list(c)} for d, c in self.terms],
        }


@dataclass(frozen=True, eq=False)
class HalFit:
    coefficients: np.ndarray
    intercept: float
    lam: float
    link: Link
    objective_trace: np.ndarray = field(repr=False)
    sweeps: int = 0
    converged: bool = True

    def linear_predictor(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape[1] == 0:
            return np.full(X.shape[0], self.intercept)
        return self.intercept + X @ self.coefficients

    def predict(self, X) -> np.ndarray:
        '''Predictions on the mean scale (probabilities for the logit link).'''
        eta = self.linear_predictor(X)
        return expit(eta) if self.link == Link.LOGIT else eta

    @property
    def l1_norm(self) -> float:
        return float(np.abs(self.coefficients).sum())

    def to_dict(self) -> dict:
        return {
            'intercept': self.intercept,
            'coefficients': self.coefficients.tolist(),
            'lambda': self.lam,
            'link': str(self.link),
            'sweeps': self.sweeps,
            'converged': self.converged,
        }


def _thin(cuts: np.ndarray, max_knots: int) -> np.ndarray:
    if len(cuts) <= max_knots:
        return cuts
    # Quantile thinning that only ever returns observed values
    picks = np.quantile(cuts, np.linspace(0, 1, max_knots), method='inverted_cdf')
    return np.unique(picks)


def build_basis(W, max_degree: int = 2, max_knots_per_dim: int = Defaults.MAX_KNOTS_PER_DIM) -> HalBasis:
    '''
    Build the HAL indicator basis on observed covariates.

    Arguments:
        W: Covariates, shape (n, d).
        max_degree: Largest interaction order.
        max_knots_per_dim: Cut points kept per dimension after quantile thinning.

    Every row contributes at most one column per subset of dimensions, placed at the row's
    own coordinates (snapped down to the nearest kept knot). Constant and duplicate
    columns are removed.
    '''
    W = as_covariates(W)
    n, d = W.shape
    if n == 0:
        raise ValidationError('Cannot build a basis on empty data')
    if max_degree < 1:
        raise ValidationError(f'max_degree must be >= 1, got {max_degree}')
    if max_knots_per_dim < 1:
        raise ValidationError(f'max_knots_per_dim must be >= 1, got {max_knots_per_dim}')

    knots = []
    snapped = np.full((n, d), np.nan)
    for j in range(d):
        values = np.unique(W[:, j])
        cuts = _thin(values[1:], max_knots_per_dim)  # 1{w >= min} is constant
        knots.append(cuts)
        if len(cuts) == 0:
            continue
        pos = np.searchsorted(cuts, W[:, j], side='right') - 1
        has_knot = pos >= 0
        snapped[has_knot, j] = cuts[pos[has_knot]]

    terms = []
    for degree in range(1, min(max_degree, d) + 1):
        for dims in combinations(range(d), degree):
            sub = snapped[:, dims]
            sub = sub[~np.isnan(sub).any(axis=1)]
            if len(sub) == 0:
                continue
            for cuts in np.unique(sub, axis=0):
                terms.append((dims, tuple(float(c) for c in cuts)))

    basis = HalBasis(tuple(knots), tuple(terms), max_degree, d)
    if not terms:
        return basis

    # Drop constant and duplicated columns (as evaluated on the training rows)
    X = basis.transform(W)
    keep = []
    seen = set()
    for j in range(X.shape[1]):
        column = X[:, j]
        if column.min() == column.max():
            continue
        key = column.astype(bool).tobytes()
        if key in seen:
            continue
        seen.add(key)
        keep.append(j)
    return HalBasis(tuple(knots), tuple(terms[j] for j in keep), max_degree, d)


def _check_inputs(X, y, weights, lam, link):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    y = np.asarray(y, dtype=float).ravel()
    weights = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float).ravel()
    if not (X.shape[0] == len(y) == len(weights)):
        raise ValidationError(f'Misaligned inputs: X has {X.shape[0]} rows, y {len(y)}, weights {len(weights)}')
    if len(y) == 0:
        raise ValidationError('Cannot fit on empty data')
    for name, arr in (('X', X), ('y', y), ('weights', weights)):
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f'Non-finite values in {name}')
    if np.any(weights < 0):
        raise ValidationError('Weights must be non-negative')
    if weights.sum() == 0:
        raise ValidationError('All weights are zero')
    if lam < 0 or not np.isfinite(lam):
        raise ValidationError(f'lambda must be a finite non-negative number, got {lam}')
    if link == Link.LOGIT and (y.min() < 0 or y.max() > 1):
        raise ValidationError('Labels must lie in [0, 1] for the logit link')
    return X, y, weights


def _objective(eta, y, weights, beta, lam, link) -> float:
    if link == Link.LOGIT:
        loss = np.sum(weights * (np.logaddexp(0, eta) - y * eta))
    else:
        loss = 0.5 * np.sum(weights * (y - eta) ** 2)
    return float(loss + lam * np.abs(beta).sum())


def _mean(eta, link):
    return expit(eta) if link == Link.LOGIT else eta


def fit_weighted_l1(
    X,
    y,
    weights=None,
    lam: float = 0.0,
    link: Link = Link.LOGIT,
    tol: float = Defaults.CD_TOL,
    max_sweeps: int = Defaults.CD_MAX_SWEEPS,
    init: HalFit | None = None,
) -> HalFit:
    '''
    Weighted L1-penalized GLM by cyclic coordinate descent with soft-thresholding.

    Arguments:
        X: Design matrix (n, p), intercept excluded.
        y: Responses; in [0, 1] (fractional allowed) for the logit link.
        weights: Non-negative row weights (default all ones).
        lam: L1 penalty on the coefficients.
        link: Link.LOGIT or Link.IDENTITY.
        tol: Convergence threshold on the largest coefficient change in a full sweep.
        max_sweeps: Sweep budget.
        init: Warm start.

    Logistic coordinates use the curvature bound 1/4 * sum w x^2, so every update is a
    majorize-minimize step and the objective never increases between sweeps.
    '''
    X, y, weights = _check_inputs(X, y, weights, lam, link)
    n, p = X.shape
    scale = 0.25 if link == Link.LOGIT else 1.0
    curvature = scale * (weights @ (X ** 2)) if p else np.zeros(0)
    c0 = scale * weights.sum()

    if init is not None and len(init.coefficients) == p:
        beta = init.coefficients.astype(float).copy()
        b0 = float(init.intercept)
    else:
        beta = np.zeros(p)
        ybar = float(weights @ y / weights.sum())
        b0 = float(logit(np.clip(ybar, 1e-10, 1 - 1e-10))) if link == Link.LOGIT else ybar
    eta = b0 + (X @ beta if p else 0.0)

    trace = [_objective(eta, y, weights, beta, lam, link)]
    converged = False
    sweeps = 0
    full_sweep = True
    while sweeps < max_sweeps:
        sweeps += 1
        max_change = 0.0

        step0 = -float(weights @ (_mean(eta, link) - y)) / c0
        b0 += step0
        eta = eta + step0
        max_change = abs(step0)

        coordinates = range(p) if full_sweep else np.flatnonzero(beta)
        for j in coordinates:
            if curvature[j] == 0:
                continue
            xj = X[:, j]
            grad = float(weights @ ((_mean(eta, link) - y) * xj))
            z = beta[j] - grad / curvature[j]
            new = np.sign(z) * max(abs(z) - lam / curvature[j], 0.0)
            delta = new - beta[j]
            if delta != 0:
                eta = eta + delta * xj
                beta[j] = new
                max_change = max(max_change, abs(delta))
        trace.append(_objective(eta, y, weights, beta, lam, link))

        if max_change < tol:
            if full_sweep:
                converged = True
                break
            full_sweep = True  # Confirm on all coordinates before stopping
        else:
            full_sweep = False

    return HalFit(
        coefficients=beta,
        intercept=b0,
        lam=float(lam),
        link=Link(link),
        objective_trace=np.asarray(trace),
        sweeps=sweeps,
        converged=converged,
    )


def duplicate_for_fractional(X, tau) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    '''
    Turn fractional labels into hard labels: row i becomes (X_i, 1, tau_i) and (X_i, 0, 1 - tau_i).
    The weighted log-likelihood of the doubled data equals the fractional-label objective.
    '''
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(-1, 1)
    tau = np.asarray(tau, dtype=float).ravel()
    if len(tau) != X.shape[0]:
        raise ValidationError(f'tau has {len(tau)} entries for {X.shape[0]} rows')
    if not np.all(np.isfinite(tau)) or tau.min() < 0 or tau.max() > 1:
        raise ValidationError('tau must lie in [0, 1]')
    X2 = np.repeat(X, 2, axis=0)
    y2 = np.tile([1.0, 0.0], len(tau))
    w2 = np.column_stack([tau, 1 - tau]).ravel()
    return X2, y2, w2


def lambda_max(X, y, weights=None, link: Link = Link.LOGIT) -> float:
    '''Smallest penalty at which every coefficient is zero.'''
    X, y, weights = _check_inputs(X, y, weights, 0.0, link)
    if X.shape[1] == 0:
        return 0.0
    ybar = weights @ y / weights.sum()
    return float(np.max(np.abs((weights * (ybar - y)) @ X)))


def lambda_grid(X, y, weights=None, link: Link = Link.LOGIT, size: int = 20, ratio: float = 1e-3) -> list[float]:
    top = lambda_max(X, y, weights, link)
    if top == 0:
        return [0.0]
    return list(np.geomspace(top, top * ratio, size))


def _heldout_loss(fit: HalFit, X, y, weights) -> float:
    eta = fit.linear_predictor(X)
    if fit.link == Link.LOGIT:
        losses = np.logaddexp(0, eta) - y * eta
    else:
        losses = 0.5 * (y - eta) ** 2
    return float(weights @ losses / weights.sum())


def cross_validate_lambda(
    X,
    y,
    weights=None,
    folds: int = Defaults.CV_FOLDS,
    grid: list[float] | None = None,
    link: Link = Link.LOGIT,
    seed: int = 0,
) -> float:
    '''
    Pick the grid value with the smallest held-out weighted loss; ties go to the larger lambda.
    '''
    X, y, weights = _check_inputs(X, y, weights, 0.0, link)
    if grid is None:
        grid = lambda_grid(X, y, weights, link)
    grid = sorted({float(g) for g in grid}, reverse=True)
    if not grid:
        raise ValidationError('Empty lambda grid')
    if any(g < 0 for g in grid):
        raise ValidationError('lambda grid values must be non-negative')
    if len(grid) == 1:
        return grid[0]
    if folds < 2:
        raise ValidationError(f'folds must be >= 2, got {folds}')
    if folds > len(y):
        raise ValidationError(f'folds ({folds}) exceeds the number of rows ({len(y)})')

    losses = np.zeros(len(grid))
    for train, test in KFold(n_splits=folds, shuffle=True, random_state=seed).split(X):
        if weights[train].sum() == 0 or weights[test].sum() == 0:
            continue
        fit = None
        for k, lam in enumerate(grid):
            fit = fit_weighted_l1(X[train], y[train], weights[train], lam, link, init=fit)
            losses[k] += _heldout_loss(fit, X[test], y[test], weights[test])

    best = 0
    for k in range(1, len(grid)):
        if losses[k] < losses[best] - 1e-12 * max(1.0, abs(losses[best])):
            best = k
    return grid[best]
