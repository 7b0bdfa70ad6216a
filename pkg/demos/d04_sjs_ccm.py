"""
Sparse joint shift and the conditional confusion matrix
=======================================================

Within each stratum of a transform T the feature law given (class, stratum)
stays fixed while the stratum posteriors move. Per-stratum classifier rates
then determine the target stratum posteriors by a linear solve.
"""

import numpy as np

from priorshift import (
    CategoricalDistribution,
    Classifier,
    ConditionalTable,
    FeatureTransform,
    JointDistribution,
    SolverConfig,
    ccm_estimate,
    em_label_shift,
    make_sjs,
    marginals,
    posteriors,
    stratum_posteriors,
)

P = JointDistribution(("a", "b", "c", "d"), [[0.20, 0.05], [0.05, 0.20], [0.15, 0.10], [0.05, 0.20]])
T = FeatureTransform.from_mapping({"a": "s", "b": "s", "c": "r", "d": "r"})
C = Classifier.from_mapping({"a": 0, "b": 1, "c": 0, "d": 1})

rows = ConditionalTable.from_rows(("s", "r"), (0, 1), [[0.9, 0.1], [0.3, 0.7]])
Q = make_sjs(P, T, rows, CategoricalDistribution(("s", "r"), [0.4, 0.6]))
qx, qy = marginals(Q)

est = ccm_estimate(P, qx, T, C, SolverConfig())
print("true stratum posteriors\n", stratum_posteriors(Q, T).rows)
print("ccm  stratum posteriors\n", np.round(est.stratum_posteriors.rows, 12))
print("true Q_Y", qy.mass, " ccm", np.round(est.priors.mass, 12))

# EM assumes invariant class-conditionals, which SJS breaks
em = em_label_shift(posteriors(P), marginals(P)[1], qx, SolverConfig())
print("em (misspecified)", np.round(em.priors.mass, 6))
