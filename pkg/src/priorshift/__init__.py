"""Class prior estimation under dataset shift on finite feature and label spaces.

Distributions are exact probability tables, so every identity linking source,
target, importance weights and posteriors can be checked numerically.
"""

from .core import (
    CategoricalDistribution,
    Classifier,
    ConditionalTable,
    FeatureTransform,
    ImportanceWeights,
    JointDistribution,
    check_absolute_continuity,
    class_conditionals,
    feature_weights_from,
    importance_weights,
    marginals,
    posteriors,
    stratum_marginal,
    stratum_mass,
    stratum_posteriors,
)
from .diagnostics import (
    DecompositionReport,
    RankReport,
    cdi_check,
    conditional_independence_check,
    rank_identifiability,
    scs_decomposition_check,
    sufficiency_check,
)
from .errors import IdentifiabilityError, PriorShiftError, SolverError, ValidationError
from .estimators import (
    PriorEstimate,
    SampleSet,
    ccm_estimate,
    classify_and_count,
    em_label_shift,
    fjs_posterior_correction,
    fjs_solve_q,
    pcc,
    project_simplex,
    reweighting,
    reweighting_emp,
    sjs_posterior_correction,
    stratum_posterior_covariate,
)
from .harness import (
    ExperimentReport,
    ScenarioConfig,
    draw_samples,
    fit_empirical,
    run_batch,
    run_estimator,
    run_experiment,
)
from .solvers import SolverConfig
from .synthesis import (
    FjsFactors,
    ShiftKind,
    ShiftSpec,
    ShiftVerdict,
    construct_fjs,
    fjs_solve_rho,
    make_covariate_shift,
    make_fjs,
    make_prior_shift,
    make_scs,
    make_sjs,
    synthesize,
    verify_shift,
)

__version__ = "0.1.0"
