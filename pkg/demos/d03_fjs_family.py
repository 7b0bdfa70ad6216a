"""
Factorizable joint shift: one feature law, many targets
========================================================

For two classes, every target prior q1 yields a joint whose weight
factorizes as u(x) v(y) and whose feature law is the requested one. The
feature law alone therefore does not pin down the priors.
"""

import numpy as np

from priorshift import (
    CategoricalDistribution,
    JointDistribution,
    SolverConfig,
    construct_fjs,
    marginals,
    verify_shift,
)

P = JointDistribution(("x1", "x2", "x3"), [[0.3, 0.05], [0.1, 0.1], [0.05, 0.4]])
qx = CategoricalDistribution(P.features, [0.5, 0.3, 0.2])
cfg = SolverConfig()

print(" q1    rho1      residual   Q_X")
for q1 in (0.2, 0.4, 0.6, 0.8):
    Q, fac = construct_fjs(P, qx, CategoricalDistribution((0, 1), [q1, 1 - q1]), cfg)
    assert verify_shift(P, Q, "fjs").holds
    print(f"{q1:.1f}  {fac.rho[0]:8.5f}  {fac.residual:.1e}  {np.round(marginals(Q)[0].mass, 12)}")
