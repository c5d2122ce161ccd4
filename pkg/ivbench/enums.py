'''
Constants shared across the package.

Usage:
    from ivbench.enums import OutcomeMode, KernelKind, Defaults

    spec = NpsemSpec(..., outcome_mode=OutcomeMode.ADDITIVE)
    kernel = fit_treatment_kernel(data, KernelKind.TABULAR)
'''

from enum import Enum, IntEnum


class StrEnum(str, Enum):
    '''String-valued enum that compares equal to its value (config files and JSON carry the value).'''

    def __str__(self) -> str:
        return self.value


class OutcomeMode(StrEnum):
    '''Outcome equation of a discrete NPSEM.'''

    ADDITIVE = 'additive'  # Y = alpha*A + gamma.W + delta*U + eps
    MULTIPLICATIVE_CONFOUNDING = 'multiplicative_confounding'  # Y = A*U + gamma.W + eps


class WorldTag(StrEnum):
    '''Which counterfactual world a dataset was drawn from.'''

    INSTRUMENT_INTERVENTION = 'instrument_intervention'
    INDEPENDENT_POLICY = 'independent_policy'


class KernelKind(StrEnum):
    '''Estimators of p(A|Z,W) and h(Z|W).'''

    TABULAR = 'tabular'
    HAL = 'hal'


class OutcomeKind(StrEnum):
    '''Estimators of Q(Z,W) = E[Y|Z,W].'''

    OLS_MAIN_EFFECTS = 'ols_main_effects'
    SATURATED = 'saturated'
    HAL = 'hal'


class DensitySource(StrEnum):
    '''Instrument density h(z|w) used by the targeted estimator in replications.'''

    DESIGN = 'design'  # the assignment probabilities of the simulated model
    FITTED = 'fitted'  # empirical stratum frequencies of each draw


class Link(StrEnum):
    LOGIT = 'logit'
    IDENTITY = 'identity'


class Provenance(StrEnum):
    '''Where an induced marginal came from.'''

    INDUCED = 'induced-from-policy'
    USER_TARGET = 'user-target'


class TargetKind(StrEnum):
    BINARY = 'binary'
    GAUSSIAN = 'gaussian'


class ExitCode(IntEnum):
    '''Process exit codes of the command-line tool.'''

    OK = 0
    # 1 is left to the interpreter for uncaught exceptions
    VALIDATION = 2  # Parse errors included
    NONCONVERGENCE = 3
    POSITIVITY = 4


class Defaults:
    '''Numeric defaults used when a caller does not override them.'''

    # Coordinate descent
    CD_TOL = 1e-8
    CD_MAX_SWEEPS = 10_000
    MAX_KNOTS_PER_DIM = 50
    CV_FOLDS = 5

    # EM-HAL
    EM_TOL = 1e-6
    EM_MAX_ITER = 200
    EM_INIT = 0.5
    ASCENT_TOL = 1e-8
    TARGET_SIGMA = 0.5  # sd of the Gaussian treatment target

    # Projected gradient descent
    PGD_STEP = 0.1
    PGD_TOL = 1e-9
    PGD_MAX_ITER = 100_000

    # Estimation
    ALPHAS = (0.1, 0.05)
    BOUND_WIDEN = 1e-6
    COMPAT_TOL = 1e-9
    ROW_SUM_TOL = 1e-12

    # Replication study
    N_LIST = (100, 500, 1000, 2000, 10_000)
    REPLICATIONS = 1000
