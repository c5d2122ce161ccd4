'''
The induced-marginal map h* -> g(h*), its Bayes form, the finite linear operator B,
Z-compatibility, the implied-policy inversion and the reduced-covariate identification family.
'''

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from ivbench.enums import Defaults, Provenance
from ivbench.errors import CompatibilityError, PositivityError, SupportError, UnsupportedError, ValidationError
from ivbench.npsem import JointTable, joint_table
from ivbench.nuisance import ConditionalKernel, InstrumentDensity
from ivbench.tables import InducedMarginal, InstrumentPolicy, Strata


def _aligned_policy(kernel: ConditionalKernel, policy: InstrumentPolicy, strata: Strata) -> np.ndarray:
    '''h*(z|w) on `strata`, with columns aligned to the kernel support; shape (k, q).'''
    extra = [z for z in policy.support if z not in kernel.support]
    P = policy.probs(strata.values)
    for j, z in enumerate(policy.support):
        if z in extra and np.any(P[:, j] > 0):
            raise SupportError(f'Policy puts mass on z={z:g}, outside the kernel support {kernel.support.tolist()}')
    out = np.zeros((strata.k, len(kernel.support)))
    for j, z in enumerate(policy.support):
        if z not in extra:
            out[:, int(np.searchsorted(kernel.support, z))] = P[:, j]
    return out


def induced_marginal(kernel: ConditionalKernel, policy: InstrumentPolicy, strata: Strata | None = None) -> InducedMarginal:
    '''
    g(h*)(a|w) = sum_z p(a|z, w) h*(z|w) on the kernel strata (or `strata` for HAL kernels).
    '''
    strata = strata if strata is not None else kernel.strata
    if strata is None:
        raise ValidationError('A HAL kernel needs explicit strata to evaluate the induced marginal on')
    h_star = _aligned_policy(kernel, policy, strata)
    p1 = (kernel.g(strata) * h_star).sum(axis=1)
    p1 = np.clip(p1, 0.0, 1.0)
    return InducedMarginal.binary(strata, p1, provenance=Provenance.INDUCED)


def induced_marginal_bayes(
    g_obs: InducedMarginal,
    h: InstrumentDensity,
    policy: InstrumentPolicy,
    z_given_aw: np.ndarray,
) -> InducedMarginal:
    '''
    Bayes form g(A|W) * E[h*(Z|W) / h(Z|W) | A, W].

    Arguments:
        g_obs: Observational P(A|W) on the same strata as `h`.
        h: Natural instrument density.
        policy: Instrument policy h*.
        z_given_aw: P(Z=z|A=a, W=w), shape (k, 2, q).
    '''
    strata = h.strata
    if g_obs.strata is None or not g_obs.strata.same_as(strata):
        raise ValidationError('g_obs and h must be defined on the same strata')
    h_star = np.zeros_like(h.table)
    P = policy.probs(strata.values)
    for j, z in enumerate(policy.support):
        hits = np.flatnonzero(h.support == z)
        if len(hits) == 0:
            if np.any(P[:, j] > 0):
                raise SupportError(f'Policy puts mass on z={z:g}, outside the natural support')
            continue
        h_star[:, hits[0]] = P[:, j]
    bad = np.argwhere((h.table == 0) & (h_star > 0))
    if len(bad):
        w, z = bad[0]
        raise PositivityError(f'h(z={h.support[z]:g}|w={strata.label(w)}) = 0 but the policy puts mass there')
    with np.errstate(invalid='ignore', divide='ignore'):
        ratio = np.where(h.table > 0, h_star / h.table, 0.0)  # (k, q)
    cond = np.nan_to_num(np.asarray(z_given_aw, dtype=float))
    if cond.shape != (strata.k, 2, len(h.support)):
        raise ValidationError(f'z_given_aw must have shape ({strata.k}, 2, {len(h.support)}), got {cond.shape}')
    out = g_obs.table * np.einsum('kaq,kq->ka', cond, ratio)
    return InducedMarginal(out, strata, provenance=Provenance.INDUCED)


def bayes_inputs(joint: JointTable) -> tuple[InducedMarginal, InstrumentDensity, np.ndarray]:
    '''(g_obs, h, P(Z|A,W)) from a joint table, ready for induced_marginal_bayes.'''
    return (
        InducedMarginal(joint.g_obs, joint.strata),
        InstrumentDensity(joint.strata, joint.support, joint.instrument_density),
        joint.z_given_aw,
    )


@dataclass(frozen=True, eq=False)
class BMatrix:
    '''
    Finite linear map from a policy vector h* over the instrument support to the induced
    treatment pmf: (B h*)[a] = sum_z P(A=a|Z=z) h*[z]. Stored with the joint pmf of (Z, A)
    it was built from.
    '''

    matrix: np.ndarray
    joint: np.ndarray

    @property
    def z_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    @property
    def a_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    @property
    def g(self) -> float:
        '''P(A=1).'''
        return float(self.a_marginal[1])

    @property
    def h(self) -> float:
        '''P(Z=1) for a binary instrument.'''
        return float(self.z_marginal[1])

    @property
    def b(self) -> np.ndarray:
        '''b_a = P(Z=1|A=a) for a binary instrument.'''
        return self.joint[1] / self.a_marginal

    def apply(self, h) -> np.ndarray:
        return self.matrix @ np.asarray(h, dtype=float)

    @classmethod
    def from_summaries(cls, g: float, h: float, b0: float, b1: float) -> BMatrix:
        '''
        Binary B from P(A=1)=g, P(Z=1)=h and b_a = P(Z=1|A=a):
        [[(1-g)(1-b0)/(1-h), (1-g)b0/h], [g(1-b1)/(1-h), g b1/h]].
        '''
        joint = np.array([
            [(1 - g) * (1 - b0), g * (1 - b1)],
            [(1 - g) * b0, g * b1],
        ])
        return build_B_matrix(joint)


def build_B_matrix(joint) -> BMatrix:
    '''
    Arguments:
        joint: pmf of (Z, A) as an array of shape (q, 2), rows indexed by instrument value.
    '''
    joint = np.asarray(joint, dtype=float)
    if joint.ndim != 2 or joint.shape[1] != 2:
        raise ValidationError(f'Joint pmf of (Z, A) must have shape (q, 2), got {joint.shape}')
    if not np.all(np.isfinite(joint)) or joint.min() < 0:
        raise ValidationError('Joint pmf entries must be finite and non-negative')
    if abs(joint.sum() - 1) > 1e-9:
        raise ValidationError(f'Joint pmf sums to {joint.sum():.12g}, not 1')
    pz = joint.sum(axis=1)
    pa = joint.sum(axis=0)
    if np.any(pz == 0):
        raise ValidationError(f'Zero marginal cell P(Z={int(np.flatnonzero(pz == 0)[0])}) = 0')
    if np.any(pa == 0):
        raise ValidationError(f'Zero marginal cell P(A={int(np.flatnonzero(pa == 0)[0])}) = 0')
    matrix = (joint / pz[:, None]).T  # row a, column z
    return BMatrix(matrix, joint)


def build_B_matrices(joint: JointTable) -> list[BMatrix]:
    '''One B per covariate stratum, from P(Z, A | W=w).'''
    out = []
    for i in range(joint.strata.k):
        cell = joint.p_wza[i]
        if cell.sum() == 0:
            raise ValidationError(f'Empty covariate stratum {joint.strata.label(i)}')
        out.append(build_B_matrix(cell / cell.sum()))
    return out


### Z-compatibility and the implied policy

@dataclass(frozen=True)
class CompatibilityReport:
    compatible: bool
    strata: pd.DataFrame

    def __bool__(self) -> bool:
        return self.compatible

    @property
    def violations(self) -> list[str]:
        return self.strata.loc[~self.strata['compatible'], 'stratum'].tolist()


def _binary_kernel(kernel: ConditionalKernel, strata: Strata) -> np.ndarray:
    if len(kernel.support) != 2:
        raise UnsupportedError('Z-compatibility and the implied policy need a binary instrument; use the LS or KL projection instead')
    return kernel.g(strata)


def _target_strata(g_star: InducedMarginal, kernel: ConditionalKernel) -> Strata:
    if g_star.strata is not None:
        return g_star.strata
    if kernel.strata is None:
        raise ValidationError('Target and kernel carry no strata')
    return kernel.strata


def z_compatible(g_star: InducedMarginal, kernel: ConditionalKernel, tol: float = Defaults.COMPAT_TOL) -> CompatibilityReport:
    '''True iff g*(w) lies in [min(g0, g1), max(g0, g1)] for every stratum (within tol).'''
    strata = _target_strata(g_star, kernel)
    g = _binary_kernel(kernel, strata)
    target = g_star.p1_at(strata.values)
    lo, hi = g.min(axis=1), g.max(axis=1)
    ok = (target >= lo - tol) & (target <= hi + tol)
    frame = pd.DataFrame({
        'stratum': [strata.label(i) for i in range(strata.k)],
        'g0': g[:, 0],
        'g1': g[:, 1],
        'g_star': target,
        'compatible': ok,
    })
    return CompatibilityReport(bool(ok.all()), frame)


def implied_policy_for_target(
    g_star: InducedMarginal,
    kernel: ConditionalKernel,
    natural: InstrumentDensity | InstrumentPolicy | None = None,
    tol: float = Defaults.COMPAT_TOL,
) -> InstrumentPolicy:
    '''
    Invert the binary map: h*(w) = (g*(w) - g0(w)) / (g1(w) - g0(w)).

    On strata with g0 = g1 every policy induces the same marginal; the natural h(1|w) is
    returned there when `natural` is given, otherwise 0.
    '''
    report = z_compatible(g_star, kernel, tol)
    if not report:
        raise CompatibilityError(f'Target is not Z-compatible in strata {report.violations}', report.violations)
    strata = _target_strata(g_star, kernel)
    g = _binary_kernel(kernel, strata)
    target = g_star.p1_at(strata.values)
    gap = g[:, 1] - g[:, 0]
    degenerate = np.abs(gap) <= tol
    fallback = np.zeros(strata.k) if natural is None else natural.probs(strata.values)[:, 1]
    with np.errstate(invalid='ignore', divide='ignore'):
        h1 = np.where(degenerate, fallback, (target - g[:, 0]) / np.where(degenerate, 1.0, gap))
    return InstrumentPolicy.binary(strata, np.clip(h1, 0.0, 1.0))


def incremental_policy(natural: InstrumentDensity | InstrumentPolicy, delta: float) -> InstrumentPolicy:
    '''
    Odds-ratio shift of a binary instrument: h_delta(1|w) = delta h / (delta h + 1 - h).
    Puts mass only where the natural density does.
    '''
    if not delta > 0:
        raise ValidationError(f'delta must be positive, got {delta}')
    if len(natural.support) != 2:
        raise UnsupportedError('Incremental policies are defined for a binary instrument')
    if natural.table is None:
        raise UnsupportedError('Incremental policies need a tabular natural density')
    h = natural.table[:, 1]
    return InstrumentPolicy.binary(natural.strata, delta * h / (delta * h + 1 - h), columns=getattr(natural, 'columns', None))


### Reduced-covariate identification

@dataclass(frozen=True)
class FamilyMember:
    columns: tuple[int, ...]
    marginal: InducedMarginal
    gcomp: float


@dataclass(frozen=True)
class ReducedFamily:
    members: list[FamilyMember]
    randomization_gap: float
    randomization_ok: bool

    @property
    def marginals(self) -> list[InducedMarginal]:
        return [m.marginal for m in self.members]

    @property
    def gcomp_values(self) -> np.ndarray:
        return np.array([m.gcomp for m in self.members])

    @property
    def spread(self) -> float:
        values = self.gcomp_values
        return float(values.max() - values.min())


def _policy_on(policy: InstrumentPolicy, strata: Strata, columns: tuple[int, ...], d: int, support) -> np.ndarray:
    '''Evaluate a policy that reads W[policy.columns] on strata of W[columns]; aligned to `support`.'''
    full = np.full((strata.k, d), np.nan)
    full[:, list(columns)] = strata.values
    P = policy.probs(full)
    out = np.zeros((strata.k, len(support)))
    for j, z in enumerate(policy.support):
        hits = np.flatnonzero(np.asarray(support) == z)
        if len(hits) == 0:
            if np.any(P[:, j] > 0):
                raise SupportError(f'Policy puts mass on z={z:g}, outside the observed support')
            continue
        out[:, hits[0]] = P[:, j]
    return out


def induced_family_reduced(source, policy: InstrumentPolicy, subsets: list[tuple[int, ...]], tol: float = Defaults.COMPAT_TOL) -> ReducedFamily:
    '''
    One induced marginal and one G-computation value per covariate subset S, for a policy
    that reads only W[S'] with S' a subset of every S.

    Arguments:
        source: NpsemSpec (exact), ObservedDataset (empirical) or JointTable.
        policy: Instrument policy; `policy.columns` is S' (None means all covariates).
        subsets: Covariate index tuples S.
        tol: Tolerance of the h(z|w) = h(z) check reported as `randomization_ok`.
    '''
    joint = joint_table(source)
    d = joint.strata.d
    reads = set(range(d)) if policy.columns is None else set(policy.columns)
    members = []
    for columns in subsets:
        columns = tuple(sorted(int(c) for c in columns))
        if not reads <= set(columns):
            raise ValidationError(f'Policy reads covariates {sorted(reads)}, not a subset of S={list(columns)}')
        reduced = joint.marginalize(columns)
        h_star = _policy_on(policy, reduced.strata, columns, d, reduced.support)
        kernel = reduced.kernel.T  # (k, q)
        if np.any(np.isnan(kernel) & (h_star > 0)):
            w, z = np.argwhere(np.isnan(kernel) & (h_star > 0))[0]
            raise PositivityError(f'Policy puts mass on empty cell (z={reduced.support[z]:g}, w={reduced.strata.label(w)})')
        p1 = np.nansum(np.where(h_star > 0, kernel, 0.0) * h_star, axis=1)
        marginal = InducedMarginal.binary(reduced.strata, np.clip(p1, 0, 1), columns=columns, provenance=Provenance.INDUCED)
        q = np.where(h_star > 0, reduced.q_zw.T, 0.0)
        gcomp = float(reduced.w_pmf @ (q * h_star).sum(axis=1))
        members.append(FamilyMember(columns, marginal, gcomp))

    h = joint.instrument_density
    gap = float((h.max(axis=0) - h.min(axis=0)).max())
    return ReducedFamily(members, gap, gap <= tol)
