'''
Estimators of the mean outcome under an instrument policy: G-computation plug-in, the
efficient influence curve, one-step logistic TMLE, and Wald-type marginal contrasts.
'''

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import statsmodels.api as sm
from scipy.stats import norm
from statsmodels.tools.sm_exceptions import PerfectSeparationError

from ivbench.enums import Defaults
from ivbench.errors import CompatibilityError, ConvergenceError, PositivityError, ValidationError
from ivbench.induced import z_compatible
from ivbench.npsem import ObservedDataset
from ivbench.nuisance import ConditionalKernel, InstrumentDensity, OutcomeRegression
from ivbench.tables import InducedMarginal, InstrumentPolicy
from ivbench.utils import expit, logit


@dataclass(frozen=True)
class EicEstimate:
    psi: float
    se: float
    ci: tuple[float, float]
    mean_eic: float
    epsilon: float
    alpha: float
    n: int
    eic: np.ndarray = field(repr=False, default=None)

    def covers(self, value: float) -> bool:
        return self.ci[0] <= value <= self.ci[1]

    def interval(self, alpha: float) -> tuple[float, float]:
        '''Normal-theory interval at another level, from the same standard error.'''
        crit = norm.ppf(1 - alpha / 2)
        return (self.psi - crit * self.se, self.psi + crit * self.se)

    def to_dict(self) -> dict:
        return {
            'psi': self.psi,
            'se': self.se,
            'ci': list(self.ci),
            'alpha': self.alpha,
            'mean_eic': self.mean_eic,
            'epsilon': self.epsilon,
            'n': self.n,
        }


@dataclass(frozen=True, eq=False)
class TargetedRegression:
    '''
    Q*(z, w) = lo + (hi - lo) * expit(logit(Q0_scaled(z, w)) + epsilon), with the initial
    regression scaled to [0, 1] by the widened outcome range and clipped inside it.
    '''

    initial: OutcomeRegression
    epsilon: float
    lo: float
    hi: float

    @property
    def bounds(self) -> tuple[float, float]:
        return self.initial.bounds

    def offset(self, z, W) -> np.ndarray:
        scaled = (self.initial.predict(z, W) - self.lo) / (self.hi - self.lo)
        margin = Defaults.BOUND_WIDEN / (self.hi - self.lo)
        return logit(np.clip(scaled, margin, 1 - margin))

    def predict(self, z, W) -> np.ndarray:
        return self.lo + (self.hi - self.lo) * expit(self.offset(z, W) + self.epsilon)


def _plugin_terms(q_reg, policy: InstrumentPolicy, W) -> np.ndarray:
    '''sum_z Q(z, W_i) h*(z|W_i) per row.'''
    P = policy.probs(W)
    total = np.zeros(P.shape[0])
    for j, z in enumerate(policy.support):
        rows = P[:, j] > 0
        if rows.any():
            total[rows] += q_reg.predict(z, W[rows]) * P[rows, j]
    return total


def gcomp_estimate(data: ObservedDataset, q_reg, policy: InstrumentPolicy) -> float:
    '''(1/n) sum_i sum_z Q(z, W_i) h*(z|W_i).'''
    return float(np.mean(_plugin_terms(q_reg, policy, data.w)))


def clever_weights(data: ObservedDataset, h_nat: InstrumentDensity, policy: InstrumentPolicy) -> np.ndarray:
    '''H_i = h*(Z_i|W_i) / h(Z_i|W_i); zero where h* is zero.'''
    h_star = policy.prob(data.z, data.w)
    h_obs = h_nat.prob(data.z, data.w)
    bad = np.flatnonzero((h_obs <= 0) & (h_star > 0))
    if len(bad):
        i = int(bad[0])
        raise PositivityError(f'Row {i}: h(z={data.z[i]:g}|w={data.w[i].tolist()}) = 0 with positive policy mass')
    with np.errstate(invalid='ignore', divide='ignore'):
        return np.where(h_star > 0, h_star / h_obs, 0.0)


def eic_values(data: ObservedDataset, q_reg, h_nat: InstrumentDensity, policy: InstrumentPolicy, psi: float) -> np.ndarray:
    '''
    D*_i = H_i (Y_i - Q(Z_i, W_i)) + sum_z Q(z, W_i) h*(z|W_i) - psi.
    '''
    weights = clever_weights(data, h_nat, policy)
    residual = data.y - q_reg.predict(data.z, data.w)
    return weights * residual + _plugin_terms(q_reg, policy, data.w) - psi


def _fluctuate(y_scaled, offset, weights) -> float:
    '''Weighted intercept-only logistic regression with a fixed offset; returns the intercept.'''
    keep = weights > 0
    if not keep.any():
        return 0.0
    model = sm.GLM(
        y_scaled[keep],
        np.ones(keep.sum()),
        offset=offset[keep],
        freq_weights=weights[keep],
        family=sm.families.Binomial(),
    )
    try:
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', category=RuntimeWarning)
            result = model.fit()
    except (PerfectSeparationError, np.linalg.LinAlgError, ValueError) as e:
        raise ConvergenceError(f'Fluctuation fit failed: {e}') from e
    epsilon = float(np.asarray(result.params)[0])
    if not getattr(result, 'converged', True) or not np.isfinite(epsilon):
        raise ConvergenceError('Fluctuation fit did not converge')

    # Newton polish so the weighted score equation holds to rounding error
    y, off, w = y_scaled[keep], offset[keep], weights[keep]
    for _ in range(3):
        mu = expit(off + epsilon)
        info = float(w @ (mu * (1 - mu)))
        if info <= 0:
            break
        epsilon += float(w @ (y - mu)) / info
    return epsilon


def tmle_estimate(
    data: ObservedDataset,
    q_init: OutcomeRegression,
    h_nat: InstrumentDensity,
    policy: InstrumentPolicy,
    alpha: float = 0.05,
    iterate: bool = False,
    max_steps: int = 20,
) -> EicEstimate:
    '''
    Targeted estimate of E[Y^{h*}].

    Arguments:
        data: Observed dataset.
        q_init: Initial outcome regression; its `bounds` fix the [0, 1] scaling of Y.
        h_nat: Natural instrument density.
        policy: Instrument policy h*.
        alpha: Interval level.
        iterate: Repeat the fluctuation until |mean EIC| <= 1e-3 * se (one step by default).
        max_steps: Step budget when iterating.
    '''
    if not 0 < alpha < 1:
        raise ValidationError(f'alpha must lie in (0, 1), got {alpha}')
    lo = q_init.bounds[0] - Defaults.BOUND_WIDEN
    hi = q_init.bounds[1] + Defaults.BOUND_WIDEN
    y_scaled = (data.y - lo) / (hi - lo)
    if y_scaled.min() < 0 or y_scaled.max() > 1:
        raise ValidationError('Outcomes fall outside the regression bounds; refit the initial regression on this data')
    weights = clever_weights(data, h_nat, policy)

    current = TargetedRegression(q_init, 0.0, lo, hi)
    steps = 1 if not iterate else max_steps
    epsilon_total = 0.0
    for _ in range(steps):
        offset = current.offset(data.z, data.w) + current.epsilon
        epsilon = _fluctuate(y_scaled, offset, weights)
        epsilon_total += epsilon
        current = TargetedRegression(q_init, epsilon_total, lo, hi)
        if not iterate:
            break
        psi = gcomp_estimate(data, current, policy)
        eic = eic_values(data, current, h_nat, policy, psi)
        se = np.sqrt(np.var(eic) / data.n)
        if abs(eic.mean()) <= 1e-3 * se:
            break

    psi = gcomp_estimate(data, current, policy)
    eic = eic_values(data, current, h_nat, policy, psi)
    se = float(np.sqrt(np.var(eic) / data.n))
    crit = norm.ppf(1 - alpha / 2)
    return EicEstimate(
        psi=psi,
        se=se,
        ci=(psi - crit * se, psi + crit * se),
        mean_eic=float(eic.mean()),
        epsilon=epsilon_total,
        alpha=alpha,
        n=data.n,
        eic=eic,
    )


### Wald contrasts

def _wald_inputs(kernel: ConditionalKernel, q_by_z, w_pmf, g_star: InducedMarginal):
    strata = g_star.strata if g_star.strata is not None else kernel.strata
    g = kernel.g(strata)  # (k, 2)
    if isinstance(q_by_z, OutcomeRegression):
        q = q_by_z.table_for(strata, kernel.support)
    else:
        q = np.asarray(q_by_z, dtype=float)
    if q.shape != (2, strata.k):
        raise ValidationError(f'Stratified outcome means must have shape (2, {strata.k}), got {q.shape}')
    w_pmf = np.ravel(np.asarray(w_pmf, dtype=float))
    if w_pmf.shape != (strata.k,) or abs(w_pmf.sum() - 1) > 1e-9:
        raise ValidationError('w_pmf must be a pmf over the target strata')
    return strata, g, q, w_pmf


def _require_compatible(g_star: InducedMarginal, kernel: ConditionalKernel, tol: float):
    report = z_compatible(g_star, kernel, tol)
    if not report:
        raise CompatibilityError(f'Target is not Z-compatible in strata {report.violations}', report.violations)


def wald_contrast(
    kernel: ConditionalKernel,
    q_by_z,
    w_pmf,
    g_star: InducedMarginal,
    f_star: InducedMarginal,
    tol: float = Defaults.COMPAT_TOL,
) -> float:
    '''
    E_W[(g*(W) - f*(W)) (Q(1, W) - Q(0, W)) / (g1(W) - g0(W))] for a binary instrument;
    strata with g0 = g1 contribute zero.

    Arguments:
        kernel: Treatment kernel supplying g0(w), g1(w).
        q_by_z: E[Y|Z=z, W=w] as an array of shape (2, k) or an OutcomeRegression.
        w_pmf: P(W = w) over the target strata.
        g_star, f_star: Z-compatible target treatment marginals.
    '''
    _require_compatible(g_star, kernel, tol)
    _require_compatible(f_star, kernel, tol)
    strata, g, q, w_pmf = _wald_inputs(kernel, q_by_z, w_pmf, g_star)
    gap = g[:, 1] - g[:, 0]
    degenerate = np.abs(gap) <= tol
    diff = g_star.p1_at(strata.values) - f_star.p1_at(strata.values)
    wald = np.where(degenerate, 0.0, (q[1] - q[0]) / np.where(degenerate, 1.0, gap))
    return float(w_pmf @ np.where(degenerate, 0.0, diff * wald))


def wald_mean(kernel: ConditionalKernel, q_by_z, w_pmf, g_star: InducedMarginal, tol: float = Defaults.COMPAT_TOL) -> float:
    '''
    Level form E[g*(W) Wald(W)] + E[(Q(0, W) g1(W) - Q(1, W) g0(W)) / (g1(W) - g0(W))].
    Needs g0 != g1 on every stratum.
    '''
    _require_compatible(g_star, kernel, tol)
    strata, g, q, w_pmf = _wald_inputs(kernel, q_by_z, w_pmf, g_star)
    gap = g[:, 1] - g[:, 0]
    if np.any(np.abs(gap) <= tol):
        bad = [strata.label(i) for i in np.flatnonzero(np.abs(gap) <= tol)]
        raise ValidationError(f'The level form is undefined where g0 = g1: strata {bad}')
    target = g_star.p1_at(strata.values)
    slope = (q[1] - q[0]) / gap
    level = (q[0] * g[:, 1] - q[1] * g[:, 0]) / gap
    return float(w_pmf @ (target * slope + level))
