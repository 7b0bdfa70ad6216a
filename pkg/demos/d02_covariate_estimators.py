"""
Estimating target priors: PCC, reweighting and EM
=================================================

PCC and reweighting are exact when only the feature law moves. EM is exact
when only the class priors move. Each is biased under the other shift.
"""

import numpy as np

from priorshift import (
    CategoricalDistribution,
    JointDistribution,
    SolverConfig,
    em_label_shift,
    feature_weights_from,
    make_covariate_shift,
    make_prior_shift,
    marginals,
    pcc,
    posteriors,
    reweighting,
)

P = JointDistribution(("x1", "x2"), [[0.4, 0.1], [0.1, 0.4]])
_, py = marginals(P)
cfg = SolverConfig()

targets = {
    "prior shift": make_prior_shift(P, CategoricalDistribution((0, 1), [0.7, 0.3])),
    "covariate shift": make_covariate_shift(P, CategoricalDistribution(P.features, [0.3, 0.7])),
}

for name, Q in targets.items():
    qx, qy = marginals(Q)
    w = feature_weights_from(P, qx)
    print(name, " true", qy.mass)
    print("  pcc        ", pcc(posteriors(P), qx).priors.mass)
    print("  reweighting", reweighting(P, w).priors.mass)
    print("  em         ", np.round(em_label_shift(posteriors(P), py, qx, cfg).priors.mass, 12))
