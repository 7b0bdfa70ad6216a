"""
Two-feature fixture: marginals, posteriors and a prior shift
============================================================

"""

import numpy as np

from priorshift import (
    CategoricalDistribution,
    JointDistribution,
    importance_weights,
    make_prior_shift,
    marginals,
    posteriors,
)

# rows are features, columns are classes 0 and 1
P = JointDistribution(("x1", "x2"), [[0.4, 0.1], [0.1, 0.4]])
px, py = marginals(P)
print("P_X", px.mass, " P_Y", py.mass)
print("P[Y | X]\n", posteriors(P).rows)

# move the class priors to (0.7, 0.3), keeping P[X | Y]
Q = make_prior_shift(P, CategoricalDistribution((0, 1), [0.7, 0.3]))
qx, qy = marginals(Q)
print("Q_X", qx.mass, " Q_Y", qy.mass)

# the joint weight q/p depends on the class only
w = importance_weights(P, Q)
print("w(x, y)\n", np.round(w.joint, 6))
