"""
Finite samples: seeded scenarios through the harness
====================================================

Each scenario is run once on the exact distributions and once on fitted
empirical ones drawn from a counter-based stream, so reruns are byte-identical.
"""

from priorshift import CategoricalDistribution, JointDistribution, ScenarioConfig, ShiftSpec, run_batch

P = JointDistribution(("x1", "x2"), [[0.4, 0.1], [0.1, 0.4]])
shift = ShiftSpec("prior", priors=CategoricalDistribution((0, 1), [0.7, 0.3]))

configs = [
    ScenarioConfig(
        estimators=("pcc", "reweighting", "em", "ccm"),
        source=P,
        shift=shift,
        sample_sizes=(n, n),
        seed=7,
        name=f"n={n}",
    )
    for n in (100, 1_000, 10_000, 100_000)
]

for rep in run_batch(configs):
    print(rep.to_markdown())
    print()
