__version__ = '0.1.0'

from ivbench.tables import Strata, InstrumentPolicy, InducedMarginal
from ivbench.npsem import (
    NpsemSpec,
    JointTable,
    ObservedDataset,
    CounterfactualDataset,
    simulate_natural,
    simulate_instrument_intervention,
    simulate_independent_policy,
    population_truth,
    independent_policy_truth,
    joint_table,
    toy_spec,
    toy_policy,
    oregon_schema_spec,
)
from ivbench.hal import (
    HalBasis,
    HalFit,
    build_basis,
    fit_weighted_l1,
    duplicate_for_fractional,
    cross_validate_lambda,
)
from ivbench.nuisance import (
    ConditionalKernel,
    OutcomeRegression,
    InstrumentDensity,
    fit_treatment_kernel,
    fit_outcome_regression,
    fit_instrument_density,
)
from ivbench.induced import (
    BMatrix,
    induced_marginal,
    induced_marginal_bayes,
    build_B_matrix,
    z_compatible,
    implied_policy_for_target,
    incremental_policy,
    induced_family_reduced,
)
from ivbench.estimators import (
    EicEstimate,
    gcomp_estimate,
    eic_values,
    tmle_estimate,
    wald_contrast,
    wald_mean,
)
from ivbench.replication import ReplicationReport, replicate_table1
from ivbench.kl_projection import (
    TreatmentTarget,
    GaussianTreatmentWorld,
    EmConfig,
    EmState,
    sample_pseudo_treatments,
    em_e_step,
    em_m_step,
    kl_project,
)
from ivbench.ls_projection import (
    PgdConfig,
    PgdState,
    TiltPolicy,
    ls_risk,
    descent_direction,
    canonical_gradient,
    project_simplex,
    unconstrained_solution,
    ls_project,
    ls_project_strata,
    gaussian_tilt_policy,
)

__all__ = [
    'Strata',
    'InstrumentPolicy',
    'InducedMarginal',
    'NpsemSpec',
    'JointTable',
    'ObservedDataset',
    'CounterfactualDataset',
    'simulate_natural',
    'simulate_instrument_intervention',
    'simulate_independent_policy',
    'population_truth',
    'independent_policy_truth',
    'joint_table',
    'toy_spec',
    'toy_policy',
    'oregon_schema_spec',
    'HalBasis',
    'HalFit',
    'build_basis',
    'fit_weighted_l1',
    'duplicate_for_fractional',
    'cross_validate_lambda',
    'ConditionalKernel',
    'OutcomeRegression',
    'InstrumentDensity',
    'fit_treatment_kernel',
    'fit_outcome_regression',
    'fit_instrument_density',
    'BMatrix',
    'induced_marginal',
    'induced_marginal_bayes',
    'build_B_matrix',
    'z_compatible',
    'implied_policy_for_target',
    'incremental_policy',
    'induced_family_reduced',
    'EicEstimate',
    'gcomp_estimate',
    'eic_values',
    'tmle_estimate',
    'wald_contrast',
    'wald_mean',
    'ReplicationReport',
    'replicate_table1',
    'TreatmentTarget',
    'GaussianTreatmentWorld',
    'EmConfig',
    'EmState',
    'sample_pseudo_treatments',
    'em_e_step',
    'em_m_step',
    'kl_project',
    'PgdConfig',
    'PgdState',
    'TiltPolicy',
    'ls_risk',
    'descent_direction',
    'canonical_gradient',
    'project_simplex',
    'unconstrained_solution',
    'ls_project',
    'ls_project_strata',
    'gaussian_tilt_policy',
]
