'''
Discrete structural models (W, Z, A, Y) with a shared latent confounder: simulation of the
natural world, the instrument-intervened world and the independent-draw policy world, and
exact population oracles by enumeration.

Structural equations (one uniform per latent, drawn in a fixed order):

    W = stratum selected by U_W from covariate_pmf
    Z = instrument value selected by U_Z from h(.|W)
    A = 1{U < p(Z, W)}
    Y = alpha*A + gamma.W + delta*U + eps            (additive)
    Y = A*U + gamma.W + eps                          (multiplicative_confounding)

with eps ~ N(0, noise_sd^2) and U_Z independent of (U, eps).
'''

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product
from typing import TYPE_CHECKING, Literal

import numpy as np
import pandas as pd

from ivbench.enums import Defaults, OutcomeMode, WorldTag
from ivbench.errors import ParseError, UnsupportedError, ValidationError
from ivbench.tables import InducedMarginal, InstrumentPolicy, Strata
from ivbench.utils import as_covariates, make_rng, readonly

if TYPE_CHECKING:
    from ivbench.kl_projection import TreatmentTarget


@dataclass(frozen=True, eq=False)
class NpsemSpec:
    '''
    Fully discrete structural model.

    Arguments:
        strata: Covariate vectors, shape (k, d).
        covariate_pmf: P(W = strata[i]), shape (k,).
        instrument_support: Instrument values, shape (q,), strictly increasing.
        instrument_policy: Natural h(z|w), shape (k, q).
        treatment_kernel: p(A=1|z, w), shape (q, k).
        alpha, gamma, delta: Outcome coefficients (gamma has one entry per covariate).
        noise_sd: Standard deviation of the Gaussian outcome noise.
        outcome_mode: OutcomeMode.
    '''

    strata: Strata
    covariate_pmf: np.ndarray
    instrument_support: np.ndarray
    instrument_policy: np.ndarray
    treatment_kernel: np.ndarray
    alpha: float = 0.0
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(1))
    delta: float = 0.0
    noise_sd: float = 0.0
    outcome_mode: OutcomeMode = OutcomeMode.ADDITIVE

    def __post_init__(self):
        strata = self.strata if isinstance(self.strata, Strata) else Strata(self.strata)
        object.__setattr__(self, 'strata', strata)
        k, d = strata.k, strata.d
        pmf = np.ravel(np.asarray(self.covariate_pmf, dtype=float))
        support = np.ravel(np.asarray(self.instrument_support, dtype=float))
        policy = np.atleast_2d(np.asarray(self.instrument_policy, dtype=float))
        kernel = np.atleast_2d(np.asarray(self.treatment_kernel, dtype=float))
        gamma = np.ravel(np.asarray(self.gamma, dtype=float))
        q = len(support)

        if pmf.shape != (k,):
            raise ValidationError(f'covariate_pmf has {pmf.size} entries for {k} strata')
        if q == 0 or np.any(np.diff(support) <= 0):
            raise ValidationError('instrument_support must be non-empty and strictly increasing')
        if policy.shape != (k, q):
            raise ValidationError(f'instrument_policy must have shape ({k}, {q}), got {policy.shape}')
        if kernel.shape != (q, k):
            raise ValidationError(f'treatment_kernel must have shape ({q}, {k}), got {kernel.shape}')
        if gamma.shape != (d,):
            raise ValidationError(f'gamma has {gamma.size} entries for {d} covariates')
        for name, arr in (('covariate_pmf', pmf), ('instrument_policy', policy), ('treatment_kernel', kernel)):
            if not np.all(np.isfinite(arr)) or arr.min() < 0 or arr.max() > 1:
                raise ValidationError(f'{name} has entries outside [0, 1]')
        if abs(pmf.sum() - 1) > Defaults.ROW_SUM_TOL:
            raise ValidationError(f'covariate_pmf sums to {pmf.sum():.15g}, not 1')
        sums = policy.sum(axis=1)
        for i in np.flatnonzero(np.abs(sums - 1) > Defaults.ROW_SUM_TOL):
            raise ValidationError(f'instrument_policy row {i} (stratum {strata.label(i)}) sums to {sums[i]:.15g}, not 1')
        if not (self.noise_sd >= 0):
            raise ValidationError(f'noise_sd must be >= 0, got {self.noise_sd}')
        try:
            mode = OutcomeMode(self.outcome_mode)
        except ValueError:
            raise ValidationError(f'Unknown outcome_mode {self.outcome_mode!r}; expected one of {[str(m) for m in OutcomeMode]}') from None

        object.__setattr__(self, 'covariate_pmf', readonly(pmf))
        object.__setattr__(self, 'instrument_support', readonly(support))
        object.__setattr__(self, 'instrument_policy', readonly(policy))
        object.__setattr__(self, 'treatment_kernel', readonly(kernel))
        object.__setattr__(self, 'gamma', readonly(gamma))
        object.__setattr__(self, 'alpha', float(self.alpha))
        object.__setattr__(self, 'delta', float(self.delta))
        object.__setattr__(self, 'noise_sd', float(self.noise_sd))
        object.__setattr__(self, 'outcome_mode', mode)

    @property
    def natural_policy(self) -> InstrumentPolicy:
        return InstrumentPolicy.tabular(self.strata, self.instrument_support, self.instrument_policy)

    def outcome(self, a, w_idx, u, eps) -> np.ndarray:
        '''Structural outcome f_Y evaluated row-wise.'''
        linear = self.strata.values[w_idx] @ self.gamma if self.strata.d else np.zeros(len(w_idx))
        if self.outcome_mode == OutcomeMode.ADDITIVE:
            return self.alpha * a + linear + self.delta * u + self.noise_sd * eps
        return a * u + linear + self.noise_sd * eps

    def cell_means(self) -> np.ndarray:
        '''
        E[Y 1{A=a} | do(Z=z), W=w] for every cell, shape (k, q, 2), from the closed-form
        moments of U ~ Uniform(0, 1) restricted to {U < p} and {U >= p}.
        '''
        p = self.treatment_kernel.T  # (k, q)
        linear = (self.strata.values @ self.gamma if self.strata.d else np.zeros(self.strata.k))[:, None]
        out = np.empty(p.shape + (2,))
        if self.outcome_mode == OutcomeMode.ADDITIVE:
            out[..., 1] = self.alpha * p + linear * p + self.delta * p ** 2 / 2
            out[..., 0] = linear * (1 - p) + self.delta * (1 - p ** 2) / 2
        else:
            out[..., 1] = p ** 2 / 2 + linear * p
            out[..., 0] = linear * (1 - p)
        return out

    def treatment_means(self) -> np.ndarray:
        '''E[f_Y(a, w, U, eps)] with a set independently of U, shape (k, 2).'''
        linear = self.strata.values @ self.gamma if self.strata.d else np.zeros(self.strata.k)
        out = np.empty((self.strata.k, 2))
        for a in (0, 1):
            if self.outcome_mode == OutcomeMode.ADDITIVE:
                out[:, a] = self.alpha * a + linear + self.delta / 2
            else:
                out[:, a] = a / 2 + linear
        return out

    def joint(self) -> JointTable:
        '''Exact joint table of the natural world.'''
        k, q = self.strata.k, len(self.instrument_support)
        p = self.treatment_kernel.T
        pwz = self.covariate_pmf[:, None] * self.instrument_policy
        p_wza = np.stack([pwz * (1 - p), pwz * p], axis=-1)
        q_zw = self.cell_means().sum(axis=-1).T  # E[Y | Z=z, W=w] does not depend on h
        assert q_zw.shape == (q, k)
        return JointTable(self.strata, self.instrument_support, p_wza, q_zw)

    def describe(self) -> dict:
        return {
            'covariate_strata': self.strata.values.tolist(),
            'covariate_pmf': self.covariate_pmf.tolist(),
            'instrument_support': self.instrument_support.tolist(),
            'instrument_policy': self.instrument_policy.tolist(),
            'treatment_kernel': self.treatment_kernel.tolist(),
            'outcome_coeffs': [self.alpha, self.gamma.tolist(), self.delta],
            'noise_sd': self.noise_sd,
            'outcome_mode': str(self.outcome_mode),
        }


@dataclass(frozen=True, eq=False)
class JointTable:
    '''
    Joint pmf P(W=w, Z=z, A=a), shape (k, q, 2), and cell means Q(z, w) = E[Y|Z=z, W=w],
    shape (q, k) (NaN for empty cells). Exact for specs, empirical for datasets.
    '''

    strata: Strata
    support: np.ndarray
    p_wza: np.ndarray
    q_zw: np.ndarray

    def __post_init__(self):
        for name in ('support', 'p_wza', 'q_zw'):
            object.__setattr__(self, name, readonly(getattr(self, name)))

    @property
    def p_wz(self) -> np.ndarray:
        return self.p_wza.sum(axis=-1)

    @property
    def w_pmf(self) -> np.ndarray:
        return self.p_wza.sum(axis=(1, 2))

    @property
    def instrument_density(self) -> np.ndarray:
        '''h(z|w), shape (k, q).'''
        return self.p_wz / self.w_pmf[:, None]

    @property
    def kernel(self) -> np.ndarray:
        '''p(A=1|z, w), shape (q, k); NaN on empty cells.'''
        with np.errstate(invalid='ignore', divide='ignore'):
            return (self.p_wza[..., 1] / self.p_wz).T

    @property
    def g_obs(self) -> np.ndarray:
        '''Observational P(A=a|w), shape (k, 2).'''
        return self.p_wza.sum(axis=1) / self.w_pmf[:, None]

    @property
    def z_given_aw(self) -> np.ndarray:
        '''P(Z=z|A=a, W=w), shape (k, 2, q); NaN where P(a, w) = 0.'''
        p_wa = self.p_wza.sum(axis=1)
        with np.errstate(invalid='ignore', divide='ignore'):
            return np.transpose(self.p_wza, (0, 2, 1)) / p_wa[:, :, None]

    def marginalize(self, columns: tuple[int, ...]) -> JointTable:
        '''Joint table of (W[columns], Z, A), with cell means averaged over the dropped covariates.'''
        reduced, idx = self.strata.project(columns)
        p_wza = np.zeros((reduced.k,) + self.p_wza.shape[1:])
        weighted_q = np.zeros((reduced.k, len(self.support)))
        pwz = self.p_wz
        q = np.where(pwz.T > 0, self.q_zw, 0.0).T  # (k, q)
        for i, r in enumerate(idx):
            p_wza[r] += self.p_wza[i]
            weighted_q[r] += pwz[i] * q[i]
        p_sz = p_wza.sum(axis=-1)
        with np.errstate(invalid='ignore', divide='ignore'):
            q_zs = np.where(p_sz > 0, weighted_q / p_sz, np.nan).T
        return JointTable(reduced, self.support, p_wza, q_zs)


@dataclass(frozen=True, eq=False)
class ObservedDataset:
    w: np.ndarray
    z: np.ndarray
    a: np.ndarray
    y: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        w = as_covariates(self.w) if np.size(self.w) else np.zeros((len(np.ravel(self.z)), 0))
        z, a, y = (np.ravel(np.asarray(v, dtype=float)) for v in (self.z, self.a, self.y))
        if not (len(w) == len(z) == len(a) == len(y)):
            raise ValidationError(f'Misaligned columns: w {len(w)}, z {len(z)}, a {len(a)}, y {len(y)}')
        if len(z) == 0:
            raise ValidationError('Dataset is empty')
        for name, arr in (('w', w), ('z', z), ('a', a), ('y', y)):
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f'Non-finite values in column {name}')
        if not np.all((a == 0) | (a == 1)):
            raise ValidationError('Treatment column a must be binary (0/1)')
        for name, arr in (('w', w), ('z', z), ('a', a), ('y', y)):
            object.__setattr__(self, name, readonly(arr))

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def d(self) -> int:
        return self.w.shape[1]

    def strata(self) -> Strata:
        return Strata.from_covariates(self.w)

    def support(self) -> np.ndarray:
        return np.unique(self.z)

    def select_columns(self, columns: tuple[int, ...]) -> ObservedDataset:
        return ObservedDataset(self.w[:, list(columns)], self.z, self.a, self.y, self.seed)

    def joint(self, strata: Strata | None = None, support=None) -> JointTable:
        '''Empirical joint table (frequencies and cell means).'''
        strata = self.strata() if strata is None else strata
        support = self.support() if support is None else np.ravel(support)
        w_idx = strata.index(self.w)
        z_idx = np.searchsorted(support, self.z)
        if np.any(z_idx >= len(support)) or np.any(support[np.minimum(z_idx, len(support) - 1)] != self.z):
            raise ValidationError('Dataset contains instrument values outside the given support')
        k, q = strata.k, len(support)
        counts = np.zeros((k, q, 2))
        np.add.at(counts, (w_idx, z_idx, self.a.astype(int)), 1.0)
        sums = np.zeros((k, q))
        np.add.at(sums, (w_idx, z_idx), self.y)
        n_wz = counts.sum(axis=-1)
        with np.errstate(invalid='ignore', divide='ignore'):
            q_zw = np.where(n_wz > 0, sums / n_wz, np.nan).T
        return JointTable(strata, support, counts / self.n, q_zw)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.w, columns=[f'w{j + 1}' for j in range(self.d)])
        frame['z'] = self.z
        frame['a'] = self.a.astype(int)
        frame['y'] = self.y
        return frame

    @classmethod
    def from_frame(cls, frame: pd.DataFrame, seed: int | None = None) -> ObservedDataset:
        for column in ('z', 'a', 'y'):
            if column not in frame.columns:
                raise ParseError(f'Dataset is missing column {column!r}', location='header')
        covariates = [c for c in frame.columns if c not in ('z', 'a', 'y')]
        expected = [f'w{j + 1}' for j in range(len(covariates))]
        if covariates != expected:
            raise ParseError(f'Covariate columns must be {expected}, got {covariates}', location='header')
        bad = np.flatnonzero(~frame['a'].isin([0, 1]).to_numpy())
        if len(bad):
            raise ParseError(f'Treatment must be 0/1, got {frame["a"].iloc[bad[0]]!r}', location=(int(bad[0]) + 2, 'a'))
        w = frame[covariates].to_numpy(dtype=float) if covariates else np.zeros((len(frame), 0))
        return cls(w, frame['z'].to_numpy(dtype=float), frame['a'].to_numpy(dtype=float), frame['y'].to_numpy(dtype=float), seed)


@dataclass(frozen=True, eq=False)
class CounterfactualDataset:
    w: np.ndarray
    z_star: np.ndarray
    a_star: np.ndarray
    y_star: np.ndarray
    world_tag: WorldTag
    seed: int | None = None

    def __post_init__(self):
        for name in ('w', 'z_star', 'a_star', 'y_star'):
            object.__setattr__(self, name, readonly(getattr(self, name)))
        object.__setattr__(self, 'world_tag', WorldTag(self.world_tag))

    @property
    def n(self) -> int:
        return len(self.y_star)

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.w, columns=[f'w{j + 1}' for j in range(self.w.shape[1])])
        frame['z'] = self.z_star
        frame['a'] = self.a_star.astype(int)
        frame['y'] = self.y_star
        return frame


### Simulation

@dataclass(frozen=True)
class _Latents:
    u_w: np.ndarray
    u_z: np.ndarray
    u: np.ndarray
    eps: np.ndarray
    v: np.ndarray  # Only used by the independent-draw world


def _draw_latents(n: int, seed: int, stream: int) -> _Latents:
    if n < 1:
        raise ValidationError(f'n must be >= 1, got {n}')
    rng = make_rng(seed, stream)
    # Fixed draw order so every world sees the same (U_W, U_Z, U, eps)
    return _Latents(rng.random(n), rng.random(n), rng.random(n), rng.standard_normal(n), rng.random(n))


def _categorical(table: np.ndarray, rows: np.ndarray, u: np.ndarray) -> np.ndarray:
    '''Inverse-CDF draw of a column index from table[rows[i]] using uniform u[i].'''
    cum = np.cumsum(table, axis=1)[rows]
    idx = (u[:, None] >= cum).sum(axis=1)
    return np.minimum(idx, table.shape[1] - 1)


def _draw_covariates(spec: NpsemSpec, lat: _Latents) -> np.ndarray:
    return _categorical(spec.covariate_pmf[None, :], np.zeros(len(lat.u_w), dtype=int), lat.u_w)


def _propagate(spec: NpsemSpec, policy_table: np.ndarray, lat: _Latents):
    w_idx = _draw_covariates(spec, lat)
    z_idx = _categorical(policy_table, w_idx, lat.u_z)
    a = (lat.u < spec.treatment_kernel[z_idx, w_idx]).astype(float)
    y = spec.outcome(a, w_idx, lat.u, lat.eps)
    return w_idx, z_idx, a, y


def _policy_table(spec: NpsemSpec, policy: InstrumentPolicy) -> np.ndarray:
    '''Policy evaluated on the spec strata and aligned to the spec instrument support.'''
    policy.check_positivity(spec.instrument_policy, spec.strata, spec.instrument_support)
    P = policy.probs(spec.strata.values)
    table = np.zeros((spec.strata.k, len(spec.instrument_support)))
    for j, z in enumerate(policy.support):
        table[:, int(np.searchsorted(spec.instrument_support, z))] = P[:, j]
    return table


def simulate_natural(spec: NpsemSpec, n: int, seed: int, stream: int = 0) -> ObservedDataset:
    '''n i.i.d. draws of (W, Z, A, Y) from the natural model; deterministic given (seed, stream).'''
    lat = _draw_latents(n, seed, stream)
    w_idx, z_idx, a, y = _propagate(spec, spec.instrument_policy, lat)
    return ObservedDataset(spec.strata.values[w_idx], spec.instrument_support[z_idx], a, y, seed)


def simulate_instrument_intervention(spec: NpsemSpec, policy: InstrumentPolicy, n: int, seed: int, stream: int = 0) -> CounterfactualDataset:
    '''
    Draws of (W, Z*, A*, Y*) where only the instrument equation is replaced by `policy`; the
    latent (U, eps) flow through the unaltered treatment and outcome equations.
    '''
    table = _policy_table(spec, policy)
    lat = _draw_latents(n, seed, stream)
    w_idx, z_idx, a, y = _propagate(spec, table, lat)
    return CounterfactualDataset(
        spec.strata.values[w_idx], spec.instrument_support[z_idx], a, y, WorldTag.INSTRUMENT_INTERVENTION, seed
    )


def _target_p1(spec: NpsemSpec, target: InducedMarginal | TreatmentTarget) -> np.ndarray:
    p1 = np.asarray(target.p1_at(spec.strata.values), dtype=float)
    if not np.all(np.isfinite(p1)) or p1.min() < 0 or p1.max() > 1:
        raise ValidationError('Target treatment probabilities must lie in [0, 1]')
    return p1


def simulate_independent_policy(spec: NpsemSpec, target: InducedMarginal | TreatmentTarget, n: int, seed: int, stream: int = 0) -> CounterfactualDataset:
    '''
    Draws where A* ~ target(.|W) uses a fresh uniform, independent of the latent U and of eps.
    The natural instrument draw is reported as z_star.
    '''
    p1 = _target_p1(spec, target)
    lat = _draw_latents(n, seed, stream)
    w_idx = _draw_covariates(spec, lat)
    z_idx = _categorical(spec.instrument_policy, w_idx, lat.u_z)
    a = (lat.v < p1[w_idx]).astype(float)
    y = spec.outcome(a, w_idx, lat.u, lat.eps)
    return CounterfactualDataset(
        spec.strata.values[w_idx], spec.instrument_support[z_idx], a, y, WorldTag.INDEPENDENT_POLICY, seed
    )


### Population oracles

def _require_spec(spec):
    if not isinstance(spec, NpsemSpec):
        raise UnsupportedError(f'Exact enumeration needs a discrete NpsemSpec, got {type(spec).__name__}')


def population_truth(spec: NpsemSpec, policy: InstrumentPolicy, method: Literal['structural', 'gcomputation'] = 'structural') -> float:
    '''
    Exact E[Y^{h*}] by enumeration.

    `structural` sums the closed-form cell contributions over (W, Z*, A*) in the intervened
    world; `gcomputation` integrates the natural-world regression E[Y|Z, W] against h*.
    '''
    _require_spec(spec)
    table = _policy_table(spec, policy)
    if method == 'structural':
        cells = spec.cell_means().sum(axis=-1)  # (k, q)
        return float(spec.covariate_pmf @ (table * cells).sum(axis=1))
    elif method == 'gcomputation':
        joint = spec.joint()
        q = np.where(table > 0, joint.q_zw.T, 0.0)
        return float(joint.w_pmf @ (table * q).sum(axis=1))
    raise ValidationError(f'Unknown method: {method}')


def independent_policy_truth(spec: NpsemSpec, target: InducedMarginal | TreatmentTarget) -> float:
    '''Exact mean outcome when A* ~ target(.|W) is drawn independently of the latent U.'''
    _require_spec(spec)
    p1 = _target_p1(spec, target)
    means = spec.treatment_means()
    return float(spec.covariate_pmf @ ((1 - p1) * means[:, 0] + p1 * means[:, 1]))


def joint_table(source) -> JointTable:
    '''Exact joint table for a spec, empirical for a dataset; a JointTable passes through.'''
    if isinstance(source, JointTable):
        return source
    if isinstance(source, (NpsemSpec, ObservedDataset)):
        return source.joint()
    raise ValidationError(f'Cannot build a joint table from {type(source).__name__}')


### Built-in specs

def toy_spec(outcome_mode: OutcomeMode = OutcomeMode.ADDITIVE) -> NpsemSpec:
    '''
    One binary covariate, binary instrument and treatment:
    P(W=1)=0.3, h(1|w)=(0.3, 0.8), p(A=1|z, w) rows z=0: (0.3, 0.8), z=1: (0.7, 0.5),
    Y = 2A + W - U + N(0, 0.05^2).
    '''
    return NpsemSpec(
        strata=Strata([[0.0], [1.0]]),
        covariate_pmf=[0.7, 0.3],
        instrument_support=[0, 1],
        instrument_policy=[[0.7, 0.3], [0.2, 0.8]],
        treatment_kernel=[[0.3, 0.8], [0.7, 0.5]],
        alpha=2.0,
        gamma=[1.0],
        delta=-1.0,
        noise_sd=0.05,
        outcome_mode=outcome_mode,
    )


def toy_policy(p1=(0.7, 0.4)) -> InstrumentPolicy:
    '''Binary instrument policy h*(1|w) on the toy strata; the default is the replication policy.'''
    return InstrumentPolicy.binary(Strata([[0.0], [1.0]]), p1)


def oregon_schema_spec() -> NpsemSpec:
    '''
    Synthetic model with a four-covariate lottery schema: w1 diagnosis flag, w2 urban flag,
    w3 birth-year band (0, 1, 2), w4 sex. The lottery depends on w1 only and nobody is
    treated without winning (g0 = 0 everywhere).
    '''
    levels = [(0, 1), (0, 1), (0, 1, 2), (0, 1)]
    marginals = [(0.75, 0.25), (0.25, 0.75), (0.3, 0.4, 0.3), (0.45, 0.55)]
    strata = np.array(list(product(*levels)), dtype=float)
    pmf = np.array([np.prod([m[int(v)] for m, v in zip(marginals, row)]) for row in strata])
    h1 = np.where(strata[:, 0] == 1, 0.47, 0.51)
    g1 = 0.36 + 0.05 * strata[:, 0] - 0.02 * strata[:, 2] + 0.03 * strata[:, 3]
    return NpsemSpec(
        strata=Strata(strata),
        covariate_pmf=pmf / pmf.sum(),
        instrument_support=[0, 1],
        instrument_policy=np.column_stack([1 - h1, h1]),
        treatment_kernel=np.vstack([np.zeros(len(strata)), g1]),
        alpha=0.1,
        gamma=[0.15, 0.05, -0.03, 0.08],
        delta=0.4,
        noise_sd=0.3,
    )


BUILTIN_SPECS = {
    'toy': toy_spec,
    'toy_multiplicative': lambda: toy_spec(OutcomeMode.MULTIPLICATIVE_CONFOUNDING),
    'oregon_schema': oregon_schema_spec,
}
