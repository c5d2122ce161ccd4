'''
Conditional tables indexed by covariate strata: covariate strata themselves, instrument
policies h*(z|w) and treatment marginals g(a|w).

A table may read only a subset of the covariate columns (`columns`); evaluation always
takes the full covariate matrix and projects it.
'''

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from ivbench.enums import Provenance
from ivbench.errors import ParseError, PositivityError, SupportError, ValidationError
from ivbench.hal import HalBasis, HalFit
from ivbench.utils import as_covariates, readonly

ROW_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class Strata:
    '''
    An ordered, finite set of covariate vectors. Zero covariates means one (empty) stratum.
    '''

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(-1, 1)
        if values.ndim != 2 or values.shape[0] == 0:
            raise ValidationError(f'Strata must be a non-empty (k, d) array, got shape {values.shape}')
        if values.shape[1] == 0:
            values = np.zeros((1, 0))
        elif len(np.unique(values, axis=0)) != len(values):
            raise ValidationError('Strata must be distinct covariate vectors')
        object.__setattr__(self, 'values', readonly(values))

    @classmethod
    def from_covariates(cls, W) -> Strata:
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(-1, 1)
        if W.shape[1] == 0:
            return cls(np.zeros((1, 0)))
        if W.shape[0] == 0:
            raise ValidationError('Cannot derive strata from empty covariates')
        return cls(np.unique(W, axis=0))

    @property
    def k(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def index(self, W) -> np.ndarray:
        '''Stratum index of every row of W; unknown covariate vectors raise ValidationError.'''
        W = np.asarray(W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(-1, 1) if self.d == 1 else W.reshape(1, -1)
        if W.shape[1] != self.d:
            raise ValidationError(f'Expected {self.d} covariate column(s), got {W.shape[1]}')
        if self.d == 0:
            return np.zeros(W.shape[0], dtype=int)
        uniq, inverse = np.unique(W, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).ravel()
        lookup = np.full(len(uniq), -1)
        for u, row in enumerate(uniq):
            hit = np.flatnonzero(np.all(self.values == row, axis=1))
            if len(hit):
                lookup[u] = hit[0]
        idx = lookup[inverse]
        if np.any(idx < 0):
            missing = uniq[lookup < 0][0]
            raise ValidationError(f'Covariate stratum {missing.tolist()} is not in the table')
        return idx

    def project(self, columns: tuple[int, ...]) -> tuple[Strata, np.ndarray]:
        '''Strata of the sub-vector W[columns], and the reduced index of every current stratum.'''
        columns = tuple(columns)
        if len(columns) == 0:
            return Strata(np.zeros((1, 0))), np.zeros(self.k, dtype=int)
        reduced = Strata.from_covariates(self.values[:, columns])
        return reduced, reduced.index(self.values[:, columns])

    def same_as(self, other: Strata) -> bool:
        return self.values.shape == other.values.shape and np.array_equal(self.values, other.values)

    def label(self, i: int) -> str:
        return '(' + ', '.join(f'{v:g}' for v in self.values[i]) + ')'


def _select(W, columns: tuple[int, ...] | None) -> np.ndarray:
    W = as_covariates(W) if np.ndim(W) != 2 else np.asarray(W, dtype=float)
    if columns is None:
        return W
    if columns and W.shape[1] <= max(columns):
        raise ValidationError(f'Table reads covariate w{max(columns) + 1} but only {W.shape[1]} column(s) were given')
    return W[:, list(columns)]


def _check_rows(table: np.ndarray, what: str, strata: Strata | None):
    if not np.all(np.isfinite(table)):
        raise ValidationError(f'{what} contains non-finite entries')
    if table.min() < 0 or table.max() > 1:
        row = int(np.argwhere((table < 0) | (table > 1))[0][0])
        where = strata.label(row) if strata is not None else row
        raise ValidationError(f'{what} has entries outside [0, 1] in stratum {where}')
    sums = table.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1) > ROW_TOL)
    if len(bad):
        row = int(bad[0])
        where = strata.label(row) if strata is not None else row
        raise ValidationError(f'{what} row for stratum {where} sums to {sums[row]:.12g}, not 1')


def _covariate_names(columns: tuple[int, ...]) -> list[str]:
    return [f'w{j + 1}' for j in columns]


def _parse_columns(frame: pd.DataFrame, value_column: str) -> tuple[int, ...]:
    columns = []
    for name in frame.columns:
        if name in ('z', 'a', value_column):
            continue
        if not (name.startswith('w') and name[1:].isdigit() and int(name[1:]) >= 1):
            raise ParseError(f'Unexpected column {name!r}', location='header')
        columns.append(int(name[1:]) - 1)
    return tuple(columns)


@dataclass(frozen=True, eq=False)
class InstrumentPolicy:
    '''
    Conditional distribution h*(z|w) of the instrument.

    Either tabular (`table` of shape (k, q) over `strata`; `strata=None` means the same row
    for every w) or basis-logistic for a binary instrument (`fit` over `basis` of W).
    '''

    support: np.ndarray
    table: np.ndarray | None = None
    strata: Strata | None = None
    columns: tuple[int, ...] | None = None
    fit: HalFit | None = field(default=None, repr=False)
    basis: HalBasis | None = field(default=None, repr=False)

    def __post_init__(self):
        object.__setattr__(self, 'support', readonly(np.ravel(self.support)))
        if len(self.support) == 0 or np.any(np.diff(self.support) <= 0):
            raise ValidationError(f'Instrument support must be non-empty and strictly increasing, got {self.support.tolist()}')
        if self.columns is not None:
            object.__setattr__(self, 'columns', tuple(int(c) for c in self.columns))
        if self.table is None:
            if self.fit is None or self.basis is None:
                raise ValidationError('A policy needs either a table or a fitted basis-logistic model')
            if len(self.support) != 2:
                raise ValidationError('Basis-logistic policies require a binary instrument')
            return
        table = np.atleast_2d(np.asarray(self.table, dtype=float))
        if table.shape[1] != len(self.support):
            raise ValidationError(f'Policy table has {table.shape[1]} columns for {len(self.support)} instrument values')
        expected = 1 if self.strata is None else self.strata.k
        if table.shape[0] != expected:
            raise ValidationError(f'Policy table has {table.shape[0]} rows for {expected} strata')
        _check_rows(table, 'Instrument policy', self.strata)
        object.__setattr__(self, 'table', readonly(table))

    ### Constructors

    @classmethod
    def tabular(cls, strata: Strata | None, support, table, columns=None) -> InstrumentPolicy:
        return cls(support=support, table=table, strata=strata, columns=columns)

    @classmethod
    def binary(cls, strata: Strata | None, p1, columns=None) -> InstrumentPolicy:
        '''Binary instrument on {0, 1} from h*(1|w) per stratum (or a scalar).'''
        p1 = np.atleast_1d(np.asarray(p1, dtype=float))
        return cls(support=[0, 1], table=np.column_stack([1 - p1, p1]), strata=strata, columns=columns)

    @classmethod
    def point_mass(cls, support, z0) -> InstrumentPolicy:
        support = np.ravel(support)
        hits = np.flatnonzero(support == z0)
        if len(hits) == 0:
            raise SupportError(f'z={z0} is not in the instrument support {support.tolist()}')
        row = np.zeros(len(support))
        row[hits[0]] = 1.0
        return cls(support=support, table=row[None, :], strata=None, columns=())

    @classmethod
    def basis_logistic(cls, basis: HalBasis, fit: HalFit, columns=None) -> InstrumentPolicy:
        return cls(support=[0, 1], fit=fit, basis=basis, columns=columns)

    ### Evaluation

    @property
    def is_tabular(self) -> bool:
        return self.table is not None

    def probs(self, W) -> np.ndarray:
        '''h*(.|W_i) for every row, shape (n, q).'''
        V = _select(W, self.columns)
        if not self.is_tabular:
            p1 = self.fit.predict(self.basis.transform(V))
            return np.column_stack([1 - p1, p1])
        if self.strata is None:
            return np.broadcast_to(self.table[0], (V.shape[0], len(self.support))).copy()
        return self.table[self.strata.index(V)]

    def support_index(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float).ravel()
        idx = np.searchsorted(self.support, z)
        idx = np.clip(idx, 0, len(self.support) - 1)
        ok = self.support[idx] == z
        if not np.all(ok):
            raise SupportError(f'Instrument value {z[~ok][0]:g} is not in the policy support {self.support.tolist()}')
        return idx

    def prob(self, z, W) -> np.ndarray:
        '''h*(z_i|W_i) for aligned vectors z and rows of W.'''
        P = self.probs(W)
        return P[np.arange(P.shape[0]), self.support_index(z)]

    def p1(self, W) -> np.ndarray:
        if len(self.support) != 2:
            raise ValidationError('p1 is only defined for a binary instrument')
        return self.probs(W)[:, 1]

    ### Operations

    def check_positivity(self, natural: np.ndarray, strata: Strata | None = None, support=None):
        '''
        Raise PositivityError if the policy puts mass where the natural table `natural`
        (shape (k, q) over `strata` and `support`) is zero.
        '''
        natural = np.atleast_2d(natural)
        support = self.support if support is None else np.ravel(support)
        P = self.probs(strata.values if strata is not None else np.zeros((1, 0)))
        for j, z in enumerate(self.support):
            hits = np.flatnonzero(support == z)
            if len(hits) == 0:
                if np.any(P[:, j] > 0):
                    raise SupportError(f'Policy puts mass on z={z:g}, outside the natural support')
                continue
            bad = np.flatnonzero((P[:, j] > 0) & (natural[:, hits[0]] == 0))
            if len(bad):
                w = strata.label(int(bad[0])) if strata is not None else '()'
                raise PositivityError(f'Policy puts mass on cell (z={z:g}, w={w}) where the natural instrument density is zero')

    def mix(self, other: InstrumentPolicy, weight: float) -> InstrumentPolicy:
        '''weight * self + (1 - weight) * other, for tabular policies on the same strata.'''
        if not (self.is_tabular and other.is_tabular):
            raise ValidationError('Only tabular policies can be mixed')
        if not np.array_equal(self.support, other.support):
            raise SupportError('Policies have different supports')
        same = (self.strata is None and other.strata is None) or (
            self.strata is not None and other.strata is not None and self.strata.same_as(other.strata)
        )
        if not same or self.columns != other.columns:
            raise ValidationError('Policies are defined on different strata')
        return InstrumentPolicy(self.support, weight * self.table + (1 - weight) * other.table, self.strata, self.columns)

    def to_frame(self, percent: bool = False) -> pd.DataFrame:
        '''Policy CSV schema: one column per covariate read, then z and probability.'''
        if not self.is_tabular:
            raise ValidationError('Basis-logistic policies have no finite table; evaluate them on strata instead')
        columns = self.columns if self.columns is not None else tuple(range(self.strata.d if self.strata else 0))
        values = self.strata.values if self.strata is not None else np.zeros((1, 0))
        rows = []
        for i in range(self.table.shape[0]):
            for j, z in enumerate(self.support):
                row = dict(zip(_covariate_names(columns), values[i])) if values.shape[1] else {}
                row['z'] = z
                row['probability'] = self.table[i, j] * (100 if percent else 1)
                rows.append(row)
        return pd.DataFrame(rows)

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> InstrumentPolicy:
        if 'z' not in frame.columns or 'probability' not in frame.columns:
            raise ParseError('Policy table needs columns z and probability', location='header')
        columns = _parse_columns(frame, 'probability')
        names = _covariate_names(columns)
        support = np.unique(frame['z'].to_numpy(dtype=float))
        if columns:
            strata = Strata.from_covariates(frame[names].to_numpy(dtype=float))
            rows = strata.index(frame[names].to_numpy(dtype=float))
        else:
            strata, rows = None, np.zeros(len(frame), dtype=int)
        table = np.zeros((1 if strata is None else strata.k, len(support)))
        seen = np.zeros_like(table, dtype=bool)
        for line, (r, z, p) in enumerate(zip(rows, frame['z'], frame['probability'])):
            j = int(np.searchsorted(support, z))
            if seen[r, j]:
                raise ParseError(f'Duplicate policy entry for z={z:g}', location=line + 2)
            seen[r, j] = True
            table[r, j] = p
        return cls(support=support, table=table, strata=strata, columns=columns)


@dataclass(frozen=True, eq=False)
class InducedMarginal:
    '''
    Conditional pmf g(a|w) of a binary treatment per stratum, table shape (k, 2).
    `strata=None` means one row shared by every w.
    '''

    table: np.ndarray
    strata: Strata | None = None
    columns: tuple[int, ...] | None = None
    provenance: Provenance = Provenance.INDUCED

    def __post_init__(self):
        table = np.atleast_2d(np.asarray(self.table, dtype=float))
        if table.shape[1] != 2:
            raise ValidationError(f'Treatment marginals are binary; got {table.shape[1]} columns')
        expected = 1 if self.strata is None else self.strata.k
        if table.shape[0] != expected:
            raise ValidationError(f'Marginal table has {table.shape[0]} rows for {expected} strata')
        _check_rows(table, 'Treatment marginal', self.strata)
        object.__setattr__(self, 'table', readonly(table))
        object.__setattr__(self, 'provenance', Provenance(self.provenance))
        if self.columns is not None:
            object.__setattr__(self, 'columns', tuple(int(c) for c in self.columns))

    @classmethod
    def binary(cls, strata: Strata | None, p1, columns=None, provenance=Provenance.USER_TARGET) -> InducedMarginal:
        p1 = np.atleast_1d(np.asarray(p1, dtype=float))
        return cls(np.column_stack([1 - p1, p1]), strata, columns, provenance)

    @property
    def p1(self) -> np.ndarray:
        return self.table[:, 1]

    def rows_for(self, W) -> np.ndarray:
        V = _select(W, self.columns)
        if self.strata is None:
            return np.zeros(V.shape[0], dtype=int)
        return self.strata.index(V)

    def p1_at(self, W) -> np.ndarray:
        return self.table[self.rows_for(W), 1]

    def prob(self, a, W) -> np.ndarray:
        a = np.asarray(a).ravel().astype(int)
        return self.table[self.rows_for(W), a]

    def to_frame(self, percent: bool = False) -> pd.DataFrame:
        columns = self.columns if self.columns is not None else tuple(range(self.strata.d if self.strata else 0))
        values = self.strata.values if self.strata is not None else np.zeros((1, 0))
        scale = 100 if percent else 1
        frame = pd.DataFrame(values, columns=_covariate_names(columns)) if values.shape[1] else pd.DataFrame(index=range(1))
        frame['p0'] = self.table[:, 0] * scale
        frame['p1'] = self.table[:, 1] * scale
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, provenance=Provenance.USER_TARGET) -> InducedMarginal:
        if 'p1' not in frame.columns:
            raise ParseError('Target table needs a p1 column', location='header')
        columns = _parse_columns(frame.drop(columns=[c for c in ('p0',) if c in frame.columns]), 'p1')
        names = _covariate_names(columns)
        if columns:
            values = frame[names].to_numpy(dtype=float)
            strata = Strata.from_covariates(values)
            if strata.k != len(frame):
                raise ParseError('Duplicate strata in target table')
            p1 = np.empty(strata.k)
            p1[strata.index(values)] = frame['p1'].to_numpy(dtype=float)
        else:
            if len(frame) != 1:
                raise ParseError('A target without covariate columns must have exactly one row')
            strata, p1 = None, frame['p1'].to_numpy(dtype=float)
        return cls.binary(strata, p1, columns=columns, provenance=provenance)
