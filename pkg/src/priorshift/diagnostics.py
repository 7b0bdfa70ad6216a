"""Identifiability and invariance checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    IDENTITY_TOL,
    ZERO_TOL,
    Classifier,
    FeatureTransform,
    JointDistribution,
    check_feature_weights,
    stratum_mass,
)
from .estimators import RANK_RTOL
from .errors import ValidationError
from .synthesis import ShiftKind, ShiftSpec, ShiftVerdict, verdict_from, verify_shift


def sufficiency_check(source: JointDistribution, transform: FeatureTransform, tol: float = IDENTITY_TOL) -> ShiftVerdict:
    """Does ``P[Y | T(X) = T(x)] = P[Y | X = x]`` hold on the feature support?"""
    codes = transform.codes_for(source.features)
    agg = stratum_mass(source, transform)
    px = source.feature_mass
    live = np.nonzero(px > ZERO_TOL)[0]
    by_x = source.mass[live] / px[live, None]
    by_t = agg[codes[live]] / agg[codes[live]].sum(axis=1, keepdims=True)
    cells = [(source.features[i], y) for i in live for y in range(source.n_classes)]
    return verdict_from(cells, by_t.ravel(), by_x.ravel(), tol, "sufficiency")


def conditional_independence_check(
    source: JointDistribution,
    w_x,
    transform: FeatureTransform,
    tol: float = IDENTITY_TOL,
) -> ShiftVerdict:
    """Are ``w_X(X)`` and ``{Y = y}`` independent given ``T(X)`` under the source?

    Compares ``E_P[w_X 1{Y=y} | T=t]`` with ``E_P[w_X | T=t] P[Y=y | T=t]``
    for every stratum of positive source mass. When this holds, target and
    source class posteriors given ``T`` coincide under covariate shift.
    """
    w = check_feature_weights(source, w_x)
    codes = transform.codes_for(source.features)
    agg = stratum_mass(source, transform)
    pt = agg.sum(axis=1)
    weighted = np.zeros_like(agg)
    np.add.at(weighted, codes, w[:, None] * source.mass)
    cells, lhs, rhs = [], [], []
    for t in np.nonzero(pt > ZERO_TOL)[0]:
        cond_w = weighted[t].sum() / pt[t]
        for y in range(source.n_classes):
            cells.append((transform.levels[t], y))
            lhs.append(weighted[t, y] / pt[t])
            rhs.append(cond_w * agg[t, y] / pt[t])
    return verdict_from(cells, lhs, rhs, tol, "conditional_independence")


@dataclass(frozen=True)
class StratumRank:
    rank: int
    sigma_min: float
    condition: float
    undefined_columns: tuple = ()

    def to_dict(self) -> dict:
        return {
            "rank": self.rank,
            "sigma_min": self.sigma_min,
            "condition": self.condition if np.isfinite(self.condition) else None,
            "undefined_columns": list(self.undefined_columns),
        }


@dataclass(frozen=True)
class RankReport:
    """Per-stratum rank of the test-function matrix; identifiable iff all are full rank."""

    per_stratum: dict
    overall_identifiable: bool
    n_classes: int = 0

    def to_dict(self) -> dict:
        return {
            "overall_identifiable": self.overall_identifiable,
            "n_classes": self.n_classes,
            "per_stratum": [
                {"stratum": _key(k), **v.to_dict()} for k, v in self.per_stratum.items()
            ],
        }


def _key(k):
    return list(k) if isinstance(k, tuple) else k


def rank_identifiability(
    source: JointDistribution,
    transforms: FeatureTransform | Sequence[FeatureTransform],
    test_functions=None,
    classifier: Classifier | None = None,
) -> RankReport:
    """Rank of ``R[i, j] = E_P[f_i(X) 1{Y=j} | S] / P[Y=j | S]`` on every stratum ``S``.

    With two transforms the strata are the cells of the pair ``(T, T')``.
    ``test_functions`` is an ``(n_classes, K)`` array of non-negative values;
    by default the decision-region indicators of ``classifier`` are used.
    A class without source mass in a stratum leaves its column undefined;
    such strata are reported as rank deficient.
    """
    if isinstance(transforms, FeatureTransform):
        transforms = [transforms]
    transforms = list(transforms)
    if not 1 <= len(transforms) <= 2:
        raise ValidationError("give one or two feature transforms")
    ell = source.n_classes
    if test_functions is None:
        if classifier is None:
            raise ValidationError("need test functions or a classifier")
        f = classifier.indicators(source.features, ell)
    else:
        f = np.asarray(test_functions, dtype=float)
        if f.shape != (ell, source.n_features):
            raise ValidationError(f"test functions must have shape ({ell}, {source.n_features})")
        if np.any(f < 0):
            raise ValidationError("test functions must be non-negative")

    code_sets = [t.codes_for(source.features) for t in transforms]
    keys = list(zip(*[[t.levels[c] for c in codes] for t, codes in zip(transforms, code_sets)]))
    if len(transforms) == 1:
        keys = [k[0] for k in keys]
    groups: dict = {}
    for i, k in enumerate(keys):
        groups.setdefault(k, []).append(i)

    per = {}
    ok = True
    for k, idx in groups.items():
        idx = np.asarray(idx)
        block = source.mass[idx]
        if block.sum() <= ZERO_TOL:
            continue
        col_mass = block.sum(axis=0)
        undefined = tuple(int(j) for j in np.nonzero(col_mass <= ZERO_TOL)[0])
        live = col_mass > ZERO_TOL
        R = f[:, idx] @ block[:, live] / col_mass[live]
        sv = np.linalg.svd(R, compute_uv=False) if R.size else np.zeros(0)
        rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv.size and sv[0] > 0 else 0
        smin = float(sv[-1]) if sv.size else 0.0
        if undefined:
            smin = 0.0
        cond = float(sv[0] / sv[-1]) if sv.size and sv[-1] > 0 and not undefined else float("inf")
        per[k] = StratumRank(rank, smin, cond, undefined)
        if rank < ell:
            ok = False
    return RankReport(per, ok, ell)


def cdi_check(
    source: JointDistribution,
    target: JointDistribution,
    transform: FeatureTransform,
    tol: float = IDENTITY_TOL,
) -> ShiftVerdict:
    """Is ``P[X | T(X) = t] = Q[X | T(X) = t]`` on every stratum charged by both?

    Involves feature marginals only, so it can be checked without target labels.
    """
    return verify_shift(source, target, ShiftSpec(ShiftKind.CDI, transform=transform), tol)


@dataclass(frozen=True)
class DecompositionReport:
    """Verdicts for covariate shift, CDI, SCS and SJS plus the three implications.

    ``implications`` maps ``"i"``, ``"ii"``, ``"iii"`` to True when the
    implication is not contradicted by this instance:

    * i:   covariate and CDI imply SCS
    * ii:  SCS implies SJS and CDI
    * iii: SJS, CDI and full rank imply covariate
    """

    verdicts: dict
    rank: RankReport
    implications: dict
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        return {
            "verdicts": {k: v.to_dict() for k, v in self.verdicts.items()},
            "rank": self.rank.to_dict(),
            "implications": dict(self.implications),
            "violations": list(self.violations),
        }


def scs_decomposition_check(
    source: JointDistribution,
    target: JointDistribution,
    transform: FeatureTransform,
    cls: Classifier,
    tol: float = IDENTITY_TOL,
) -> DecompositionReport:
    """Evaluate the interplay of covariate shift, CDI, SCS and SJS on one pair."""
    verdicts = {
        kind.value: verify_shift(source, target, ShiftSpec(kind, transform=transform), tol)
        for kind in (ShiftKind.COVARIATE, ShiftKind.CDI, ShiftKind.SCS, ShiftKind.SJS)
    }
    rank = rank_identifiability(source, transform, classifier=cls)
    cov, cdi, scs, sjs = (verdicts[k].holds for k in ("covariate", "cdi", "scs", "sjs"))
    implications = {
        "i": (not (cov and cdi)) or scs,
        "ii": (not scs) or (sjs and cdi),
        "iii": (not (sjs and cdi and rank.overall_identifiable)) or cov,
    }
    labels = {
        "i": "covariate shift and CDI hold but SCS fails",
        "ii": "SCS holds but SJS or CDI fails",
        "iii": "SJS, CDI and the rank condition hold but covariate shift fails",
    }
    violations = [labels[k] for k, fine in implications.items() if not fine]
    return DecompositionReport(verdicts, rank, implications, violations)
