"""Random instance generators and independent reference computations for the tests.

Oracles here are written from the defining formulas, cell by cell, without
calling the package code they are compared with.
"""

from __future__ import annotations

from fractions import Fraction

import numpy as np

from priorshift import (
    CategoricalDistribution,
    Classifier,
    ConditionalTable,
    FeatureTransform,
    JointDistribution,
)

P2 = JointDistribution(("x1", "x2"), [[0.4, 0.1], [0.1, 0.4]])

# four features in two strata {a, b} and {c, d}; within each stratum the two
# class-conditionals differ, so the classifier below has full-rank confusion matrices
P4 = JointDistribution(
    ("a", "b", "c", "d"),
    [[0.20, 0.05], [0.05, 0.20], [0.15, 0.10], [0.05, 0.20]],
)
T4 = FeatureTransform.from_mapping({"a": "s", "b": "s", "c": "r", "d": "r"})
C4 = Classifier.from_mapping({"a": 0, "b": 1, "c": 0, "d": 1})


def features(k):
    return tuple(f"f{i}" for i in range(k))


def random_joint(rng, k, ell, min_prior=None, concentration=1.0):
    """Dirichlet joint with full support; optionally every class prior >= ``min_prior``."""
    while True:
        mass = rng.dirichlet(np.full(k * ell, concentration)).reshape(k, ell)
        mass = np.maximum(mass, 1e-6)
        mass /= mass.sum()
        if min_prior is None or mass.sum(axis=0).min() >= min_prior:
            return JointDistribution(features(k), mass)


def random_pmf(rng, labels, floor=0.0):
    w = rng.dirichlet(np.ones(len(labels)))
    w = floor + (1 - floor * len(labels)) * w
    return CategoricalDistribution(tuple(labels), w / w.sum())


def random_priors(rng, ell, floor=0.05):
    return random_pmf(rng, range(ell), floor)


def random_transform(rng, feats, n_strata, min_size=1):
    """Random surjection onto ``n_strata`` levels, each stratum with ``min_size`` features."""
    k = len(feats)
    assert k >= n_strata * min_size
    base = np.repeat(np.arange(n_strata), min_size)
    rest = rng.integers(0, n_strata, size=k - base.size)
    labels = rng.permutation(np.concatenate([base, rest]))
    return FeatureTransform(feats, tuple(f"t{s}" for s in labels))


def round_robin_classifier(rng, transform, ell):
    """Every class predicted inside every stratum (needs >= ell features per stratum)."""
    preds = np.zeros(len(transform.features), int)
    for t in range(transform.n_strata):
        idx = rng.permutation(np.nonzero(transform.codes == t)[0])
        preds[idx] = np.arange(idx.size) % ell
    return Classifier(transform.features, preds)


def random_stratum_posteriors(rng, transform, ell, floor=0.05):
    rows = [random_pmf(rng, range(ell), floor).mass for _ in transform.levels]
    return ConditionalTable.from_rows(transform.levels, tuple(range(ell)), rows)


# ---------------------------------------------------------------------------
# oracles


def exact_prior_shift(mass, q):
    """Fraction-exact ``Q(x, y) = P(x | y) q_y``."""
    mass = [[Fraction(v).limit_denominator(10**9) for v in row] for row in mass]
    q = [Fraction(v).limit_denominator(10**9) for v in q]
    col = [sum(r[j] for r in mass) for j in range(len(q))]
    return [[r[j] / col[j] * q[j] for j in range(len(q))] for r in mass]


def direct_posteriors(mass):
    out = []
    for row in np.asarray(mass):
        s = row.sum()
        out.append(row / s if s > 0 else np.full(row.size, np.nan))
    return np.array(out)


def stratum_posteriors_direct(mass, transform):
    """Loop-based ``Q[Y | T = t]`` for every level of ``transform``."""
    mass = np.asarray(mass)
    out = {}
    for level in transform.levels:
        tot = np.zeros(mass.shape[1])
        for i, f in enumerate(transform.features):
            if transform(f) == level:
                tot += mass[i]
        out[level] = tot / tot.sum() if tot.sum() > 0 else None
    return out


def ratio_invariance(P, Q):
    """``w(x, y) w(x', y') = w(x, y') w(x', y)`` over all support quadruples; max relative defect."""
    p, q = P.mass, Q.mass
    w = np.divide(q, p, out=np.zeros_like(q), where=p > 0)
    worst = 0.0
    k, ell = w.shape
    for a in range(k):
        for b in range(k):
            for y in range(ell):
                for z in range(ell):
                    lhs, rhs = w[a, y] * w[b, z], w[a, z] * w[b, y]
                    scale = max(abs(lhs), abs(rhs), 1e-300)
                    worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def loglik_maximizer_binary(post, p, qx, grid=2001):
    """Maximise ``sum_x qX(x) log sum_i (q_i/p_i) post_i(x)`` over q in the 2-simplex.

    Coarse grid followed by ternary search on the concave objective.
    """
    post, p, qx = map(np.asarray, (post, p, qx))

    def obj(t):
        q = np.array([t, 1 - t])
        m = post @ (q / p)
        with np.errstate(divide="ignore"):
            return float(qx[qx > 0] @ np.log(m[qx > 0]))

    ts = np.linspace(0, 1, grid)
    i = int(np.argmax([obj(t) for t in ts]))
    lo, hi = ts[max(i - 1, 0)], ts[min(i + 1, grid - 1)]
    for _ in range(200):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        if obj(m1) < obj(m2):
            lo = m1
        else:
            hi = m2
    t = 0.5 * (lo + hi)
    return np.array([t, 1 - t])


def binary_rho_by_bisection(P, qx, q):
    """Independent bisection in rho itself (not log rho) on the binary scale-constant system."""
    p = P.mass.sum(axis=0)
    post = P.mass / P.mass.sum(axis=1, keepdims=True)

    def lhs_minus_rhs(r):
        den = post[:, 0] * r * q[0] / p[0] + post[:, 1] * q[1] / p[1]
        return r * float(np.sum(qx * post[:, 0] / den)) - p[0]

    lo, hi = 1e-12, 1.0
    while lhs_minus_rhs(hi) < 0:
        hi *= 2
    for _ in range(400):
        mid = 0.5 * (lo + hi)
        if lhs_minus_rhs(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
