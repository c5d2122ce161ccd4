'''
Nuisance components fitted from observed data: the treatment kernel p(A|Z,W), the outcome
regression Q(Z,W) = E[Y|Z,W] and the natural instrument density h(Z|W).
'''

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import statsmodels.api as sm

from ivbench.enums import Defaults, KernelKind, Link, OutcomeKind
from ivbench.errors import PositivityError, ValidationError
from ivbench.hal import HalBasis, HalFit, build_basis, cross_validate_lambda, fit_weighted_l1
from ivbench.npsem import JointTable, ObservedDataset
from ivbench.tables import InducedMarginal, InstrumentPolicy, Strata
from ivbench.utils import as_covariates, readonly


def _design(z, W) -> np.ndarray:
    W = as_covariates(W) if np.ndim(W) != 2 else np.asarray(W, dtype=float)
    z = np.broadcast_to(np.asarray(z, dtype=float), (W.shape[0],))
    return np.column_stack([z, W])


def _support_index(support: np.ndarray, z) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    idx = np.clip(np.searchsorted(support, z), 0, len(support) - 1)
    if np.any(support[idx] != z):
        bad = z[support[idx] != z][0]
        raise ValidationError(f'Instrument value {bad:g} is outside the fitted support {support.tolist()}')
    return idx


def _fit_hal(X, y, link: Link, max_degree: int, max_knots_per_dim: int, lam: float | None, seed: int):
    basis = build_basis(X, max_degree, max_knots_per_dim)
    D = basis.transform(X)
    if lam is None:
        lam = cross_validate_lambda(D, y, None, link=link, seed=seed) if D.shape[1] else 0.0
    return basis, fit_weighted_l1(D, y, None, lam, link)


@dataclass(frozen=True, eq=False)
class ConditionalKernel:
    '''
    p(A=1|z, w) for a binary treatment.

    Tabular kernels store a (q, k) table over `support` and `strata`; HAL kernels store a
    logistic HAL fit on the basis of (z, w).
    '''

    kind: KernelKind
    support: np.ndarray
    strata: Strata | None = None
    table: np.ndarray | None = None
    basis: HalBasis | None = field(default=None, repr=False)
    fit: HalFit | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'kind', KernelKind(self.kind))
        support = readonly(np.ravel(self.support))
        object.__setattr__(self, 'support', support)
        if self.kind == KernelKind.TABULAR:
            table = np.array(self.table, dtype=float)
            if table.shape != (len(support), self.strata.k):
                raise ValidationError(f'Kernel table must have shape ({len(support)}, {self.strata.k}), got {table.shape}')
            if not np.all(np.isfinite(table)) or table.min() < 0 or table.max() > 1:
                raise ValidationError('Kernel probabilities must lie in [0, 1]')
            object.__setattr__(self, 'table', readonly(table))

    @classmethod
    def from_table(cls, strata: Strata, support, table) -> ConditionalKernel:
        return cls(KernelKind.TABULAR, support, strata, table)

    @classmethod
    def from_joint(cls, joint: JointTable) -> ConditionalKernel:
        kernel = joint.kernel
        empty = np.argwhere(np.isnan(kernel))
        if len(empty):
            z, w = empty[0]
            raise ValidationError(f'Empty stratum (z={joint.support[z]:g}, w={joint.strata.label(w)})')
        return cls.from_table(joint.strata, joint.support, kernel)

    def p1(self, z, W) -> np.ndarray:
        z_idx = _support_index(self.support, z)
        if self.kind == KernelKind.TABULAR:
            w_idx = self.strata.index(W)
            return self.table[np.broadcast_to(z_idx, w_idx.shape), w_idx]
        X = _design(self.support[z_idx] if z_idx.size > 1 else self.support[z_idx[0]], W)
        return np.clip(self.fit.predict(self.basis.transform(X)), 0.0, 1.0)

    def prob(self, a, z, W) -> np.ndarray:
        p1 = self.p1(z, W)
        a = np.asarray(a, dtype=float)
        return np.where(a == 1, p1, 1 - p1)

    def density(self, a, z, W) -> np.ndarray:
        '''Alias of prob so kernels and continuous treatment densities share one interface.'''
        return self.prob(a, z, W)

    def table_for(self, strata: Strata) -> np.ndarray:
        '''p(A=1|z, w) on every (support value, stratum) pair, shape (q, k).'''
        if self.kind == KernelKind.TABULAR and self.strata.same_as(strata):
            return np.array(self.table)
        return np.vstack([self.p1(np.full(strata.k, z), strata.values) for z in self.support])

    def g(self, strata: Strata | None = None) -> np.ndarray:
        '''g_z(w) = p(A=1|z, w) per stratum, shape (k, q).'''
        return self.table_for(strata if strata is not None else self.strata).T


@dataclass(frozen=True, eq=False)
class OutcomeRegression:
    '''
    Q(z, w) = E[Y|Z=z, W=w]. `bounds` is the observed outcome range used to map Y to [0, 1]
    for the logistic fluctuation.
    '''

    kind: OutcomeKind
    bounds: tuple[float, float]
    coefficients: np.ndarray | None = None
    strata: Strata | None = None
    support: np.ndarray | None = None
    table: np.ndarray | None = None
    basis: HalBasis | None = field(default=None, repr=False)
    fit: HalFit | None = field(default=None, repr=False)

    def predict(self, z, W) -> np.ndarray:
        W = as_covariates(W) if np.ndim(W) != 2 else np.asarray(W, dtype=float)
        if self.kind == OutcomeKind.OLS_MAIN_EFFECTS:
            return self.coefficients[0] + _design(z, W) @ self.coefficients[1:]
        if self.kind == OutcomeKind.SATURATED:
            z_idx = np.broadcast_to(_support_index(self.support, z), (W.shape[0],))
            w_idx = self.strata.index(W)
            values = self.table[z_idx, w_idx]
            if np.any(np.isnan(values)):
                i = int(np.flatnonzero(np.isnan(values))[0])
                raise PositivityError(
                    f'No observations in cell (z={self.support[z_idx[i]]:g}, w={self.strata.label(w_idx[i])}) of the saturated regression'
                )
            return values
        return self.fit.predict(self.basis.transform(_design(z, W)))

    def table_for(self, strata: Strata, support) -> np.ndarray:
        '''Predictions on every (z, stratum) pair, shape (q, k).'''
        return np.vstack([self.predict(z, strata.values) for z in np.ravel(support)])


@dataclass(frozen=True, eq=False)
class InstrumentDensity:
    '''Tabular h(z|w), shape (k, q) over `strata` and `support`.'''

    strata: Strata
    support: np.ndarray
    table: np.ndarray

    def __post_init__(self):
        table = readonly(self.table)
        support = readonly(np.ravel(self.support))
        if table.shape != (self.strata.k, len(support)):
            raise ValidationError(f'Instrument density must have shape ({self.strata.k}, {len(support)}), got {table.shape}')
        sums = table.sum(axis=1)
        if np.any(np.abs(sums - 1) > 1e-9):
            i = int(np.argmax(np.abs(sums - 1)))
            raise ValidationError(f'Instrument density row for stratum {self.strata.label(i)} sums to {sums[i]:.12g}')
        object.__setattr__(self, 'table', table)
        object.__setattr__(self, 'support', support)

    @property
    def support_mask(self) -> np.ndarray:
        return self.table > 0

    def probs(self, W) -> np.ndarray:
        return self.table[self.strata.index(W)]

    def prob(self, z, W) -> np.ndarray:
        z_idx = _support_index(self.support, z)
        w_idx = self.strata.index(W)
        return self.table[w_idx, np.broadcast_to(z_idx, w_idx.shape)]

    def as_policy(self) -> InstrumentPolicy:
        '''The natural density as an instrument policy (the identity intervention).'''
        return InstrumentPolicy.tabular(self.strata, self.support, self.table)


### Fitting

def _empty_cells(counts: np.ndarray, joint: JointTable) -> list[str]:
    return [f'(z={joint.support[z]:g}, w={joint.strata.label(w)})' for w, z in np.argwhere(counts == 0)]


def fit_treatment_kernel(
    data: ObservedDataset,
    kind: KernelKind = KernelKind.TABULAR,
    strata: Strata | None = None,
    support=None,
    max_degree: int = 2,
    max_knots_per_dim: int = Defaults.MAX_KNOTS_PER_DIM,
    lam: float | None = None,
    seed: int = 0,
) -> ConditionalKernel:
    '''
    Fit p(A|Z,W).

    Arguments:
        data: Observed dataset.
        kind: KernelKind.TABULAR (stratified frequencies) or KernelKind.HAL.
        strata, support: Cells the tabular kernel must cover (default: those observed).
        max_degree, max_knots_per_dim, lam, seed: HAL options; `lam=None` cross-validates.
    '''
    kind = KernelKind(kind)
    if kind == KernelKind.TABULAR:
        joint = data.joint(strata, support)
        empty = _empty_cells(joint.p_wz, joint)
        if empty:
            raise ValidationError(f'Empty stratum in treatment kernel: {", ".join(empty)}')
        return ConditionalKernel.from_joint(joint)
    X = _design(data.z, data.w)
    basis, fit = _fit_hal(X, data.a, Link.LOGIT, max_degree, max_knots_per_dim, lam, seed)
    return ConditionalKernel(KernelKind.HAL, data.support() if support is None else support, basis=basis, fit=fit)


def fit_outcome_regression(
    data: ObservedDataset,
    kind: OutcomeKind = OutcomeKind.OLS_MAIN_EFFECTS,
    max_degree: int = 2,
    max_knots_per_dim: int = Defaults.MAX_KNOTS_PER_DIM,
    lam: float | None = None,
    seed: int = 0,
) -> OutcomeRegression:
    '''
    Fit Q(Z,W) = E[Y|Z,W] by OLS on (1, z, w), stratum means, or HAL with the identity link.
    '''
    kind = OutcomeKind(kind)
    bounds = (float(data.y.min()), float(data.y.max()))
    if kind == OutcomeKind.OLS_MAIN_EFFECTS:
        X = sm.add_constant(_design(data.z, data.w), has_constant='add')
        if np.linalg.matrix_rank(X) < X.shape[1]:
            raise ValidationError('Singular design for y ~ 1 + z + w (constant or collinear columns)')
        params = sm.OLS(data.y, X).fit().params
        return OutcomeRegression(kind, bounds, coefficients=np.asarray(params))
    if kind == OutcomeKind.SATURATED:
        joint = data.joint()
        return OutcomeRegression(kind, bounds, strata=joint.strata, support=joint.support, table=joint.q_zw)
    X = _design(data.z, data.w)
    basis, fit = _fit_hal(X, data.y, Link.IDENTITY, max_degree, max_knots_per_dim, lam, seed)
    return OutcomeRegression(kind, bounds, basis=basis, fit=fit)


def fit_instrument_density(data: ObservedDataset, strata: Strata | None = None, support=None) -> InstrumentDensity:
    '''Empirical h(z|w) per covariate stratum.'''
    joint = data.joint(strata, support)
    n_w = joint.w_pmf
    if np.any(n_w == 0):
        empty = [joint.strata.label(i) for i in np.flatnonzero(n_w == 0)]
        raise ValidationError(f'Empty covariate stratum in instrument density: {", ".join(empty)}')
    return InstrumentDensity(joint.strata, joint.support, joint.instrument_density)


def observed_marginal(data: ObservedDataset, strata: Strata | None = None) -> InducedMarginal:
    '''Observational P(A|W) per stratum.'''
    joint = data.joint(strata)
    if np.any(joint.w_pmf == 0):
        raise ValidationError('Empty covariate stratum')
    return InducedMarginal(joint.g_obs, joint.strata)
