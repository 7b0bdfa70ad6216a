"""
Shift diagnostics and the rank condition
========================================

The decomposition report checks covariate shift, CDI, SCS and SJS on a pair
of distributions together with the rank of the per-stratum test matrices.
When the rank fails, distinct SJS targets share one feature law.
"""

import numpy as np

from priorshift import (
    CategoricalDistribution,
    Classifier,
    ConditionalTable,
    FeatureTransform,
    JointDistribution,
    make_scs,
    make_sjs,
    marginals,
    rank_identifiability,
    scs_decomposition_check,
)

T = FeatureTransform.from_mapping({"a": "s", "b": "s", "c": "r", "d": "r"})
C = Classifier.from_mapping({"a": 0, "b": 1, "c": 0, "d": 1})

P = JointDistribution(("a", "b", "c", "d"), [[0.20, 0.05], [0.05, 0.20], [0.15, 0.10], [0.05, 0.20]])
Q = make_scs(P, T, CategoricalDistribution(("s", "r"), [0.8, 0.2]))
rep = scs_decomposition_check(P, Q, T, C)
for kind, v in rep.verdicts.items():
    print(f"{kind:10s} holds={v.holds}  max deviation {v.max_deviation:.2e}")
print("identifiable", rep.rank.overall_identifiable, " violations", rep.violations)

# class-conditionals equal inside each stratum: no class signal in the classifier rates
flat = JointDistribution(("a", "b", "c", "d"), [[0.20, 0.12], [0.05, 0.03], [0.10, 0.10], [0.20, 0.20]])
print("\nflat source identifiable", rank_identifiability(flat, T, classifier=C).overall_identifiable)
pi = CategoricalDistribution(("s", "r"), [0.6, 0.4])
a = make_sjs(flat, T, ConditionalTable.from_rows(("s", "r"), (0, 1), [[0.9, 0.1], [0.2, 0.8]]), pi)
b = make_sjs(flat, T, ConditionalTable.from_rows(("s", "r"), (0, 1), [[0.3, 0.7], [0.6, 0.4]]), pi)
print("Q_X a", marginals(a)[0].mass, " Q_Y a", np.round(marginals(a)[1].mass, 6))
print("Q_X b", marginals(b)[0].mass, " Q_Y b", np.round(marginals(b)[1].mass, 6))
