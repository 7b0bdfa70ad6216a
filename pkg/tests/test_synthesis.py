import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    P2,
    P4,
    T4,
    binary_rho_by_bisection,
    exact_prior_shift,
    random_joint,
    random_pmf,
    random_priors,
    random_stratum_posteriors,
    random_transform,
    ratio_invariance,
)
from priorshift import (
    CategoricalDistribution,
    ConditionalTable,
    FeatureTransform,
    JointDistribution,
    ShiftKind,
    ShiftSpec,
    SolverConfig,
    construct_fjs,
    fjs_solve_rho,
    make_covariate_shift,
    make_fjs,
    make_prior_shift,
    make_scs,
    make_sjs,
    marginals,
    posteriors,
    synthesize,
    verify_shift,
)
from priorshift.errors import (
    NotNormalized,
    UnsupportedClassInStratum,
    UnsupportedFeature,
    ValidationError,
)
from priorshift.solvers import system_residual
from priorshift.synthesis import fjs_factors_from_uv

CFG = SolverConfig()


def pmf(labels, mass):
    return CategoricalDistribution(tuple(labels), mass)


def seeds():
    return st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------------------
# prior and covariate shift


def test_prior_shift_identity():
    np.testing.assert_allclose(make_prior_shift(P2, pmf((0, 1), [0.5, 0.5])).mass, P2.mass, atol=1e-15)


def test_prior_shift_p2_against_exact_fractions():
    Q = make_prior_shift(P2, pmf((0, 1), [0.7, 0.3]))
    exact = np.array(exact_prior_shift(P2.mass, [0.7, 0.3]), dtype=float)
    np.testing.assert_allclose(Q.mass, exact, atol=1e-15)
    np.testing.assert_allclose(Q.mass, [[0.56, 0.06], [0.14, 0.24]], atol=1e-15)
    np.testing.assert_allclose(marginals(Q)[0].mass, [0.62, 0.38], atol=1e-15)


def test_prior_shift_onto_one_class():
    Q = make_prior_shift(P2, pmf((0, 1), [1.0, 0.0]))
    np.testing.assert_allclose(Q.mass[:, 1], 0)
    np.testing.assert_allclose(marginals(Q)[0].mass, [0.8, 0.2], atol=1e-15)


def test_prior_shift_needs_source_class_mass():
    J = JointDistribution(("x1", "x2"), [[0.5, 0.0], [0.5, 0.0]])
    with pytest.raises(ValidationError):
        make_prior_shift(J, pmf((0, 1), [0.5, 0.5]))


def test_covariate_shift_p2():
    np.testing.assert_allclose(make_covariate_shift(P2, pmf(P2.features, [0.5, 0.5])).mass, P2.mass, atol=1e-15)
    Q = make_covariate_shift(P2, pmf(P2.features, [0.7, 0.3]))
    np.testing.assert_allclose(marginals(Q)[1].mass, [0.62, 0.38], atol=1e-15)
    Q = make_covariate_shift(P2, pmf(P2.features, [1.0, 0.0]))
    np.testing.assert_allclose(marginals(Q)[1].mass, [0.8, 0.2], atol=1e-15)


def test_covariate_shift_outside_support():
    J = JointDistribution(("x1", "x2"), [[0.5, 0.5], [0.0, 0.0]])
    with pytest.raises(UnsupportedFeature):
        make_covariate_shift(J, pmf(J.features, [0.5, 0.5]))


# ---------------------------------------------------------------------------
# FJS


def test_make_fjs_special_cases():
    np.testing.assert_allclose(make_fjs(P2, [1, 1], [1, 1]).mass, P2.mass)
    np.testing.assert_allclose(
        make_fjs(P2, [1, 1], [1.4, 0.6]).mass, make_prior_shift(P2, pmf((0, 1), [0.7, 0.3])).mass, atol=1e-15
    )
    np.testing.assert_allclose(
        make_fjs(P2, [1.4, 0.6], [1, 1]).mass, make_covariate_shift(P2, pmf(P2.features, [0.7, 0.3])).mass, atol=1e-15
    )


def test_make_fjs_rejects_unnormalized_factors():
    with pytest.raises(NotNormalized):
        make_fjs(P2, [2, 1], [1, 1])


@pytest.mark.parametrize("c", [0.5, 2.0, 10.0])
def test_fjs_scaling_degeneracy(c):
    rng = np.random.default_rng(int(c * 10))
    P = random_joint(rng, 5, 3)
    u = rng.uniform(0.2, 2.0, 5)
    v = rng.uniform(0.2, 2.0, 3)
    v /= (u[:, None] * P.mass * v).sum()
    np.testing.assert_allclose(make_fjs(P, c * u, v / c).mass, make_fjs(P, u, v).mass, rtol=0, atol=1e-15)


def test_construct_fjs_no_shift():
    Q, fac = construct_fjs(P2, pmf(P2.features, [0.5, 0.5]), pmf((0, 1), [0.5, 0.5]), CFG)
    np.testing.assert_allclose(Q.mass, P2.mass, atol=1e-12)
    np.testing.assert_allclose(fac.rho, [1.0], atol=1e-10)
    np.testing.assert_allclose(fac.u, 1.0, atol=1e-10)
    np.testing.assert_allclose(fac.v, 1.0, atol=1e-10)


def test_construct_fjs_recovers_prior_shift():
    Q, fac = construct_fjs(P2, pmf(P2.features, [0.62, 0.38]), pmf((0, 1), [0.7, 0.3]), CFG)
    np.testing.assert_allclose(Q.mass, make_prior_shift(P2, pmf((0, 1), [0.7, 0.3])).mass, atol=1e-10)
    np.testing.assert_allclose(fac.rho, [1.0], atol=1e-9)


# rho for (P2, qX=(0.7,0.3), q=(0.6,0.4)), frozen from an independent bisection in rho
RHO_P2_07_06 = 0.5894092842526077


def test_construct_fjs_binary_against_bisection_oracle():
    qx, q = np.array([0.7, 0.3]), np.array([0.6, 0.4])
    assert abs(binary_rho_by_bisection(P2, qx, q) - RHO_P2_07_06) < 1e-12
    Q, fac = construct_fjs(P2, pmf(P2.features, qx), pmf((0, 1), q), CFG)
    assert abs(fac.rho[0] - RHO_P2_07_06) < 1e-9
    assert fac.residual < 1e-10
    fx, fy = marginals(Q)
    np.testing.assert_allclose(fx.mass, qx, atol=1e-9)
    np.testing.assert_allclose(fy.mass, q, atol=1e-9)
    assert verify_shift(P2, Q, "fjs").holds
    assert ratio_invariance(P2, Q) < 1e-9


def test_fjs_solve_rho_prior_covariate_and_identity_cases():
    fac = fjs_solve_rho(P2, pmf(P2.features, [0.62, 0.38]), pmf((0, 1), [0.7, 0.3]), CFG)
    np.testing.assert_allclose(fac.rho, [1.0], atol=1e-9)
    # covariate shift: v must be constant, which forces rho_1 = (p_1/q_1) / (p_2/q_2)
    fac = fjs_solve_rho(P2, pmf(P2.features, [0.7, 0.3]), pmf((0, 1), [0.62, 0.38]), CFG)
    np.testing.assert_allclose(fac.rho, [0.38 / 0.62], atol=1e-9)
    assert abs(fac.v[0] / fac.v[1] - 1.0) < 1e-9
    np.testing.assert_allclose(make_fjs(P2, fac.u, fac.v).mass,
                               make_covariate_shift(P2, pmf(P2.features, [0.7, 0.3])).mass, atol=1e-10)
    fac = fjs_solve_rho(P2, pmf(P2.features, [0.5, 0.5]), pmf((0, 1), [0.5, 0.5]), CFG)
    np.testing.assert_allclose(fac.rho, [1.0], atol=1e-10)


def test_construct_fjs_three_classes_damped_iteration():
    rng = np.random.default_rng(3)
    ok = 0
    for _ in range(30):
        P = random_joint(rng, 6, 3)
        u = rng.uniform(0.3, 3.0, 6)
        v = rng.uniform(0.3, 3.0, 3)
        v /= (u[:, None] * P.mass * v).sum()
        target = make_fjs(P, u, v)
        fx, fy = marginals(target)
        Q, fac = construct_fjs(P, fx, fy, CFG)
        np.testing.assert_allclose(Q.mass, target.mass, atol=1e-8)
        ok += 1
    assert ok == 30


def test_rho_from_factors_matches_solver():
    rng = np.random.default_rng(11)
    P = random_joint(rng, 5, 2)
    u = rng.uniform(0.3, 3.0, 5)
    v = np.array([1.7, 0.5])
    v /= (u[:, None] * P.mass * v).sum()
    fac = fjs_factors_from_uv(P, u, v)
    Q = make_fjs(P, u, v)
    solved = fjs_solve_rho(P, marginals(Q)[0], marginals(Q)[1], CFG)
    np.testing.assert_allclose(solved.rho, fac.rho, rtol=1e-8)
    post = np.nan_to_num(posteriors(P).rows)
    assert system_residual(post, Q.feature_mass, P.class_mass, Q.class_mass, np.append(fac.rho, 1.0)) < 1e-12


# ---------------------------------------------------------------------------
# SJS and SCS


def test_sjs_constant_transform_is_prior_shift():
    T = FeatureTransform.constant(P2.features)
    post = ConditionalTable.from_rows(T.levels, (0, 1), [[0.7, 0.3]])
    Q = make_sjs(P2, T, post, pmf(T.levels, [1.0]))
    np.testing.assert_allclose(Q.mass, make_prior_shift(P2, pmf((0, 1), [0.7, 0.3])).mass, atol=1e-15)


def test_sjs_identity_transform_sets_posteriors():
    T = FeatureTransform.identity(P2.features)
    rows = [[0.3, 0.7], [0.9, 0.1]]
    Q = make_sjs(P2, T, ConditionalTable.from_rows(T.levels, (0, 1), rows), pmf(T.levels, [0.5, 0.5]))
    np.testing.assert_allclose(marginals(Q)[0].mass, [0.5, 0.5], atol=1e-15)
    np.testing.assert_allclose(posteriors(Q).rows, rows, atol=1e-15)
    assert verify_shift(P2, Q, ShiftSpec("sjs", transform=T)).holds


def test_sjs_on_p4():
    rows = ConditionalTable.from_rows(("s", "r"), (0, 1), [[0.9, 0.1], [0.3, 0.7]])
    Q = make_sjs(P4, T4, rows, pmf(("s", "r"), [0.4, 0.6]))
    v = verify_shift(P4, Q, ShiftSpec("sjs", transform=T4))
    assert v.holds and v.max_deviation < 1e-12


def test_sjs_rejects_class_without_source_mass_in_stratum():
    P = JointDistribution(("a", "b", "c", "d"), [[0.25, 0.0], [0.25, 0.0], [0.25, 0.0], [0.0, 0.25]])
    T = FeatureTransform.from_mapping({"a": 0, "b": 0, "c": 1, "d": 1})
    rows = ConditionalTable.from_rows((0, 1), (0, 1), [[0.5, 0.5], [0.5, 0.5]])
    with pytest.raises(UnsupportedClassInStratum):
        make_sjs(P, T, rows, pmf((0, 1), [0.5, 0.5]))


def test_scs_single_stratum_is_identity():
    T = FeatureTransform.constant(P2.features)
    np.testing.assert_allclose(make_scs(P2, T, pmf(T.levels, [1.0])).mass, P2.mass, atol=1e-15)


def test_scs_on_p4_keeps_within_stratum_joint():
    Q = make_scs(P4, T4, pmf(("s", "r"), [0.9, 0.1]))
    np.testing.assert_allclose(Q.mass[:2] / Q.mass[:2].sum(), P4.mass[:2] / P4.mass[:2].sum(), atol=1e-15)
    np.testing.assert_allclose(Q.mass[2:] / Q.mass[2:].sum(), P4.mass[2:] / P4.mass[2:].sum(), atol=1e-15)
    assert verify_shift(P4, Q, ShiftSpec("scs", transform=T4)).holds
    assert verify_shift(P4, Q, ShiftSpec("cdi", transform=T4)).holds
    assert verify_shift(P4, Q, ShiftSpec("sjs", transform=T4)).holds


def test_scs_rejects_mass_on_empty_stratum():
    T = FeatureTransform(P2.features, ("u", "u"))
    with pytest.raises(ValidationError):
        make_scs(P2, T, pmf(("u", "v"), [0.5, 0.5]))


# ---------------------------------------------------------------------------
# verification


def test_verify_prior_shift_p2():
    Q = make_prior_shift(P2, pmf((0, 1), [0.7, 0.3]))
    v = verify_shift(P2, Q, "prior")
    assert v.holds and v.max_deviation < 1e-15


def test_verify_prior_shift_fails_under_covariate_shift():
    Q = make_covariate_shift(P2, pmf(P2.features, [0.7, 0.3]))
    v = verify_shift(P2, Q, "prior")
    assert not v.holds and v.max_deviation > 0.01
    assert v.witnesses
    top = v.witnesses[0]
    assert abs(top.lhs - top.rhs) == pytest.approx(v.max_deviation)


@pytest.mark.parametrize("kind", list(ShiftKind))
def test_identity_satisfies_every_kind(kind):
    T = FeatureTransform.constant(P2.features)
    assert verify_shift(P2, P2, ShiftSpec(kind, transform=T)).holds


def test_verify_fjs_rejects_non_factorizable_target():
    P = JointDistribution(("a", "b"), np.full((2, 2), 0.25))
    Q = JointDistribution(("a", "b"), [[0.4, 0.1], [0.1, 0.4]])
    assert not verify_shift(P, Q, "fjs").holds


def test_shift_spec_json_round_trip():
    spec = ShiftSpec(
        "sjs",
        transform=T4,
        stratum_posteriors=ConditionalTable.from_rows(("s", "r"), (0, 1), [[0.9, 0.1], [0.3, 0.7]]),
        stratum_pmf=pmf(("s", "r"), [0.4, 0.6]),
    )
    back = ShiftSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    np.testing.assert_allclose(synthesize(P4, back).mass, synthesize(P4, spec).mass)
    with pytest.raises(ValidationError, match="kind"):
        ShiftSpec.from_dict({"priors": [0.5, 0.5]})


def test_cdi_has_no_constructor():
    with pytest.raises(ValidationError):
        synthesize(P2, ShiftSpec("cdi", transform=FeatureTransform.constant(P2.features)))


# ---------------------------------------------------------------------------
# properties


def _instance(seed, min_strata_size=1):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(2, 9))
    ell = int(rng.integers(2, 5))
    P = random_joint(rng, k, ell)
    n = int(rng.integers(1, min(4, k // min_strata_size) + 1))
    T = random_transform(rng, P.features, n, min_strata_size)
    return rng, P, T


@settings(max_examples=80, deadline=None)
@given(seeds())
def test_constructor_verifier_round_trip(seed):
    rng, P, T = _instance(seed)
    ell = P.n_classes
    Q = make_prior_shift(P, random_priors(rng, ell, 0.0))
    assert verify_shift(P, Q, "prior", 1e-12).holds
    Q = make_covariate_shift(P, random_pmf(rng, P.features))
    assert verify_shift(P, Q, "covariate", 1e-12).holds
    u = rng.uniform(0.1, 3, P.n_features)
    v = rng.uniform(0.1, 3, ell)
    v /= (u[:, None] * P.mass * v).sum()
    assert verify_shift(P, make_fjs(P, u, v), "fjs", 1e-12).holds
    Q = make_sjs(P, T, random_stratum_posteriors(rng, T, ell, 0.0), random_pmf(rng, T.levels))
    assert verify_shift(P, Q, ShiftSpec("sjs", transform=T), 1e-12).holds
    Q = make_scs(P, T, random_pmf(rng, T.levels))
    assert verify_shift(P, Q, ShiftSpec("scs", transform=T), 1e-12).holds


@settings(max_examples=80, deadline=None)
@given(seeds())
def test_special_case_embeddings(seed):
    rng, P, T = _instance(seed)
    Q = make_prior_shift(P, random_priors(rng, P.n_classes))
    assert verify_shift(P, Q, "fjs").holds
    assert verify_shift(P, Q, ShiftSpec("sjs", transform=T)).holds
    Q = make_covariate_shift(P, random_pmf(rng, P.features))
    assert verify_shift(P, Q, "fjs").holds


@settings(max_examples=80, deadline=None)
@given(seeds())
def test_sjs_coarsening(seed):
    rng, P, T_fine = _instance(seed)
    # coarsen T_fine by merging its levels at random
    outer = {lvl: f"c{rng.integers(0, 2)}" for lvl in T_fine.levels}
    T_coarse = T_fine.then(outer)
    Q = make_sjs(
        P,
        T_coarse,
        random_stratum_posteriors(rng, T_coarse, P.n_classes, 0.0),
        random_pmf(rng, T_coarse.levels),
    )
    assert verify_shift(P, Q, ShiftSpec("sjs", transform=T_coarse)).holds
    assert verify_shift(P, Q, ShiftSpec("sjs", transform=T_fine)).holds


@settings(max_examples=60, deadline=None)
@given(seeds(), st.sampled_from([0.5, 2.0, 10.0]))
def test_fjs_scaling_property(seed, c):
    rng = np.random.default_rng(seed)
    P = random_joint(rng, int(rng.integers(1, 8)), int(rng.integers(2, 5)))
    u = rng.uniform(0.1, 3, P.n_features)
    v = rng.uniform(0.1, 3, P.n_classes)
    v /= (u[:, None] * P.mass * v).sum()
    np.testing.assert_allclose(make_fjs(P, c * u, v / c).mass, make_fjs(P, u, v).mass, rtol=1e-14, atol=1e-16)
