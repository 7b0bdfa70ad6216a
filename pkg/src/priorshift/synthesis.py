"""Build target distributions under each invariance assumption and check them.

Constructors take a source ``P`` and the free parameters of a shift type and
return a target ``Q``. ``verify_shift`` evaluates the defining identity of a
shift type cell by cell over the common support and reports the worst
deviation.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

import numpy as np

from . import solvers
from .core import (
    IDENTITY_TOL,
    ZERO_TOL,
    CategoricalDistribution,
    ConditionalTable,
    FeatureTransform,
    JointDistribution,
    check_absolute_continuity,
    feature_weights_from,
    importance_weights,
    posteriors,
    stratum_mass,
)
from .errors import (
    AbsoluteContinuityViolation,
    NotNormalized,
    ShapeMismatch,
    UnsupportedClass,
    UnsupportedClassInStratum,
    UnsupportedFeature,
    UnsupportedStratum,
    ValidationError,
)


class ShiftKind(str, enum.Enum):
    PRIOR = "prior"
    COVARIATE = "covariate"
    FJS = "fjs"
    SJS = "sjs"
    CDI = "cdi"
    SCS = "scs"

    @classmethod
    def parse(cls, value) -> ShiftKind:
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("_", "").replace("-", "")
        aliases = {
            "prior": cls.PRIOR, "priorshift": cls.PRIOR, "labelshift": cls.PRIOR,
            "priorprobabilityshift": cls.PRIOR,
            "covariate": cls.COVARIATE, "covariateshift": cls.COVARIATE,
            "fjs": cls.FJS, "factorizablejointshift": cls.FJS,
            "sjs": cls.SJS, "sparsejointshift": cls.SJS,
            "cdi": cls.CDI, "conditionaldistributioninvariance": cls.CDI,
            "scs": cls.SCS, "sparsecovariateshift": cls.SCS,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValidationError(f"unknown shift kind {value!r}") from None

    @property
    def needs_transform(self) -> bool:
        return self in (ShiftKind.SJS, ShiftKind.CDI, ShiftKind.SCS)


def _pmf_from_json(obj, what):
    if obj is None:
        return None
    if isinstance(obj, CategoricalDistribution):
        return obj
    if isinstance(obj, Mapping):
        if "labels" in obj and "mass" in obj:
            return CategoricalDistribution.from_dict(obj)
        return CategoricalDistribution(tuple(obj), list(obj.values()))
    raise ValidationError(f"{what}: expected a mapping or {{labels, mass}} object")


@dataclass(frozen=True, eq=False)
class ShiftSpec:
    """Declarative description of a shift scenario.

    Only the fields relevant to ``kind`` are used. For checking a pair of
    distributions only ``kind`` (and ``transform`` for the stratified kinds)
    is needed; constructing a target needs the full payload:

    ========== =====================================================
    prior      ``priors``
    covariate  ``feature_pmf``
    fjs        ``u`` and ``v``, or ``feature_pmf`` and ``priors``
    sjs        ``transform``, ``stratum_posteriors``, ``stratum_pmf``
    scs        ``transform``, ``stratum_pmf``
    cdi        ``transform`` (checking only)
    ========== =====================================================
    """

    kind: ShiftKind
    priors: CategoricalDistribution | None = None
    feature_pmf: CategoricalDistribution | None = None
    u: np.ndarray | None = None
    v: np.ndarray | None = None
    transform: FeatureTransform | None = None
    stratum_posteriors: ConditionalTable | None = None
    stratum_pmf: CategoricalDistribution | None = None

    def __post_init__(self):
        kind = ShiftKind.parse(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind.needs_transform and self.transform is None:
            raise ValidationError(f"{kind.value} shift needs a feature transform")
        if (self.u is None) != (self.v is None):
            raise ValidationError("give both u and v or neither")
        if self.u is not None:
            object.__setattr__(self, "u", np.asarray(self.u, dtype=float))
            object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.transform is not None and self.stratum_pmf is not None:
            if set(self.stratum_pmf.labels) != set(self.transform.levels):
                raise ValidationError("stratum_pmf must be indexed by the transform's strata")
        if self.stratum_posteriors is not None and self.transform is not None:
            if set(self.stratum_posteriors.conditions) != set(self.transform.levels):
                raise ValidationError("stratum_posteriors must have one row per stratum")

    def to_dict(self) -> dict:
        d: dict = {"kind": self.kind.value}
        if self.priors is not None:
            d["priors"] = self.priors.mass.tolist()
        if self.feature_pmf is not None:
            d["feature_pmf"] = self.feature_pmf.to_dict()
        if self.u is not None:
            d["u"] = self.u.tolist()
            d["v"] = self.v.tolist()
        if self.transform is not None:
            d["transform"] = self.transform.to_dict()
        if self.stratum_posteriors is not None:
            d["stratum_posteriors"] = self.stratum_posteriors.to_dict()
        if self.stratum_pmf is not None:
            d["stratum_pmf"] = self.stratum_pmf.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> ShiftSpec:
        if "kind" not in d:
            raise ValidationError("shift spec JSON lacks the 'kind' discriminator")
        priors = d.get("priors")
        if priors is not None and not isinstance(priors, Mapping):
            priors = CategoricalDistribution(tuple(range(len(priors))), priors)
        else:
            priors = _pmf_from_json(priors, "priors")
        transform = FeatureTransform.from_dict(d["transform"]) if d.get("transform") else None
        sp = d.get("stratum_posteriors")
        if sp is not None and not isinstance(sp, ConditionalTable):
            if "rows" in sp:
                sp = ConditionalTable.from_dict(sp)
            else:
                n = len(next(iter(sp.values())))
                sp = ConditionalTable.from_rows(tuple(sp), tuple(range(n)), list(sp.values()))
        return cls(
            kind=d["kind"],
            priors=priors,
            feature_pmf=_pmf_from_json(d.get("feature_pmf"), "feature_pmf"),
            u=d.get("u"),
            v=d.get("v"),
            transform=transform,
            stratum_posteriors=sp,
            stratum_pmf=_pmf_from_json(d.get("stratum_pmf"), "stratum_pmf"),
        )


@dataclass(frozen=True, eq=False)
class FjsFactors:
    """Feature factor ``u``, label factor ``v`` and scale constants ``rho``.

    ``rho`` holds the ``n_classes - 1`` free constants; the last class's
    constant is 1 by convention.
    """

    u: np.ndarray
    v: np.ndarray
    rho: np.ndarray
    residual: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("u", "v", "rho"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if np.any(self.u < 0) or np.any(self.v < 0):
            raise ValidationError("FJS factors must be non-negative")
        if not np.all(np.isfinite(self.rho)) or np.any(self.rho <= 0):
            raise ValidationError("rho constants must be finite and positive")

    def to_dict(self) -> dict:
        return {
            "u": self.u.tolist(),
            "v": self.v.tolist(),
            "rho": self.rho.tolist(),
            "residual": self.residual,
            "diagnostics": self.diagnostics,
        }


class Witness(NamedTuple):
    cell: tuple
    lhs: float
    rhs: float


@dataclass(frozen=True)
class ShiftVerdict:
    """Outcome of checking an identity: ``holds`` iff ``max_deviation <= tol``."""

    holds: bool
    max_deviation: float
    witnesses: list
    tol: float
    kind: str = ""

    def __bool__(self) -> bool:
        return self.holds

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "holds": self.holds,
            "max_deviation": self.max_deviation,
            "tol": self.tol,
            "witnesses": [{"cell": list(w.cell), "lhs": w.lhs, "rhs": w.rhs} for w in self.witnesses],
        }


def verdict_from(cells, lhs, rhs, tol, kind="", deviation=None, n_witnesses=5) -> ShiftVerdict:
    """Collect the largest ``|lhs - rhs|`` (or supplied ``deviation``) into a verdict."""
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    dev = np.abs(lhs - rhs) if deviation is None else np.asarray(deviation, dtype=float)
    if dev.size == 0:
        return ShiftVerdict(True, 0.0, [], tol, kind)
    order = np.argsort(-dev, kind="stable")[:n_witnesses]
    worst = float(dev[order[0]])
    witnesses = [Witness(tuple(cells[i]), float(lhs[i]), float(rhs[i])) for i in order if dev[i] > 0]
    return ShiftVerdict(bool(worst <= tol), worst, witnesses, tol, kind)


# ---------------------------------------------------------------------------
# constructors


def make_prior_shift(source: JointDistribution, target_priors) -> JointDistribution:
    """Keep the class-conditional feature distributions, replace the priors."""
    priors = _class_pmf(source, target_priors)
    py = source.class_mass
    bad = (priors > ZERO_TOL) & (py <= ZERO_TOL)
    if np.any(bad):
        raise UnsupportedClass(f"target prior mass on classes without source mass: {np.nonzero(bad)[0].tolist()}")
    cond = np.divide(source.mass, py, out=np.zeros_like(source.mass), where=py > ZERO_TOL)
    return JointDistribution.normalized(source.features, cond * priors)


def make_covariate_shift(source: JointDistribution, target_features) -> JointDistribution:
    """Keep the class posteriors, replace the feature marginal."""
    qx = _feature_pmf(source, target_features)
    px = source.feature_mass
    bad = (qx > ZERO_TOL) & (px <= ZERO_TOL)
    if np.any(bad):
        raise UnsupportedFeature(
            f"target feature mass outside source support: {[source.features[i] for i in np.nonzero(bad)[0]]}"
        )
    post = np.divide(source.mass, px[:, None], out=np.zeros_like(source.mass), where=px[:, None] > ZERO_TOL)
    return JointDistribution.normalized(source.features, qx[:, None] * post)


def make_fjs(source: JointDistribution, u, v) -> JointDistribution:
    """Target with importance weights ``w(x, y) = u(x) v(y)``."""
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    if u.shape != (source.n_features,) or v.shape != (source.n_classes,):
        raise ShapeMismatch(f"u must have length {source.n_features} and v length {source.n_classes}")
    if np.any(u < 0) or np.any(v < 0) or not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
        raise ValidationError("u and v must be finite and non-negative")
    weights = u[:, None] * source.mass * v[None, :]
    total = weights.sum()
    if abs(total - 1.0) > IDENTITY_TOL:
        raise NotNormalized(f"sum of u(x) v(y) p(x, y) is {total!r}, not 1")
    return JointDistribution(source.features, weights / total)


def fjs_factors_from_uv(source: JointDistribution, u, v) -> FjsFactors:
    """Scale constants implied by given factors: ``rho_j = (v_j p_j / q_j) / (v_l p_l / q_l)``."""
    target = make_fjs(source, u, v)
    p, q = source.class_mass, target.class_mass
    v = np.asarray(v, dtype=float)
    if np.any(q <= ZERO_TOL) or np.any(p <= ZERO_TOL):
        raise ValidationError("rho is only defined when every class has source and target mass")
    s = v * p / q
    rho = s[:-1] / s[-1]
    return FjsFactors(u, v, rho)


def construct_fjs(
    source: JointDistribution,
    target_features,
    target_priors,
    cfg: solvers.SolverConfig | None = None,
) -> tuple[JointDistribution, FjsFactors]:
    """FJS target with prescribed feature marginal and class priors.

    Solves the scale-constant system for ``rho`` (bisection for two classes,
    damped fixed-point iteration otherwise) and assembles ``Q = u v P``.

    Raises
    ------
    NoConvergence, InfeasibleSystem
        From the rho solver.
    """
    factors = fjs_solve_rho(source, target_features, target_priors, cfg)
    return make_fjs(source, factors.u, factors.v), factors


def fjs_solve_rho(
    source: JointDistribution,
    target_features,
    target_priors,
    cfg: solvers.SolverConfig | None = None,
) -> FjsFactors:
    """Scale constants (and factors) for known target priors."""
    cfg = cfg or solvers.SolverConfig()
    w_x = feature_weights_from(source, _as_pmf(target_features, source.features))
    q = _class_pmf(source, target_priors)
    if np.any(q <= 0):
        raise ValidationError("target priors must be strictly positive")
    p = source.class_mass
    if np.any(p <= ZERO_TOL):
        raise UnsupportedClass("every class needs positive source mass")
    post = np.nan_to_num(posteriors(source).rows)
    qx = w_x * source.feature_mass
    if source.n_classes == 2:
        rho_full, info = solvers.solve_rho_binary(post, qx, p, q, cfg)
    else:
        rho_full, info = solvers.solve_rho_fixed_point(post, qx, p, q, cfg)
    u, v = solvers.factors_uv(post, w_x, p, q, rho_full)
    return FjsFactors(u, v, rho_full[:-1], info["residual"], info)


def make_sjs(
    source: JointDistribution,
    transform: FeatureTransform,
    stratum_posteriors: ConditionalTable,
    stratum_pmf: CategoricalDistribution,
) -> JointDistribution:
    """Keep ``P[X | Y, T(X)]``; set the class posteriors per stratum and the stratum weights."""
    codes = transform.codes_for(source.features)
    agg = stratum_mass(source, transform)
    pi = stratum_pmf.aligned(transform.levels)
    pt = agg.sum(axis=1)
    bad = (pi > ZERO_TOL) & (pt <= ZERO_TOL)
    if np.any(bad):
        raise UnsupportedStratum(f"target mass on strata without source mass: {[transform.levels[i] for i in np.nonzero(bad)[0]]}")
    rows = _stratum_rows(stratum_posteriors, transform, source.n_classes, needed=pi > ZERO_TOL)
    if np.any((rows > ZERO_TOL) & (agg <= ZERO_TOL) & (pi > ZERO_TOL)[:, None]):
        t, y = np.argwhere((rows > ZERO_TOL) & (agg <= ZERO_TOL) & (pi > ZERO_TOL)[:, None])[0]
        raise UnsupportedClassInStratum(f"class {y} has no source mass in stratum {transform.levels[t]!r}")
    cond = np.divide(source.mass, agg[codes], out=np.zeros_like(source.mass), where=agg[codes] > ZERO_TOL)
    weights = cond * rows[codes] * pi[codes][:, None]
    return JointDistribution.normalized(source.features, weights)


def make_scs(
    source: JointDistribution,
    transform: FeatureTransform,
    stratum_pmf: CategoricalDistribution,
) -> JointDistribution:
    """Keep ``P[X, Y | T(X)]``; only the stratum weights move."""
    codes = transform.codes_for(source.features)
    pt = stratum_mass(source, transform).sum(axis=1)
    pi = stratum_pmf.aligned(transform.levels)
    bad = (pi > ZERO_TOL) & (pt <= ZERO_TOL)
    if np.any(bad):
        raise UnsupportedStratum(f"target mass on strata without source mass: {[transform.levels[i] for i in np.nonzero(bad)[0]]}")
    scale = np.divide(pi, pt, out=np.zeros_like(pi), where=pt > ZERO_TOL)
    return JointDistribution.normalized(source.features, source.mass * scale[codes][:, None])


def synthesize(source: JointDistribution, spec: ShiftSpec, cfg: solvers.SolverConfig | None = None) -> JointDistribution:
    """Dispatch a ``ShiftSpec`` to the matching constructor."""
    kind = spec.kind
    if kind is ShiftKind.PRIOR:
        _require(spec, "priors")
        return make_prior_shift(source, spec.priors)
    if kind is ShiftKind.COVARIATE:
        _require(spec, "feature_pmf")
        return make_covariate_shift(source, spec.feature_pmf)
    if kind is ShiftKind.FJS:
        if spec.u is not None:
            return make_fjs(source, spec.u, spec.v)
        _require(spec, "feature_pmf", "priors")
        return construct_fjs(source, spec.feature_pmf, spec.priors, cfg)[0]
    if kind is ShiftKind.SJS:
        _require(spec, "stratum_posteriors", "stratum_pmf")
        return make_sjs(source, spec.transform, spec.stratum_posteriors, spec.stratum_pmf)
    if kind is ShiftKind.SCS:
        _require(spec, "stratum_pmf")
        return make_scs(source, spec.transform, spec.stratum_pmf)
    raise ValidationError("CDI only constrains features; build the target with the 'scs' kind instead")


# ---------------------------------------------------------------------------
# verification


def verify_shift(
    source: JointDistribution,
    target: JointDistribution,
    spec: ShiftSpec | str,
    tol: float = IDENTITY_TOL,
    transform: FeatureTransform | None = None,
) -> ShiftVerdict:
    """Check whether ``(source, target)`` satisfies the identity of ``spec.kind``.

    Cells where both distributions vanish and conditioning events of zero
    mass under either distribution are skipped. FJS is checked through the
    invariance of class-conditional density ratios rather than by searching
    for factors ``u, v``; its deviation is the relative spread of those ratios.

    Raises
    ------
    ShapeMismatch
        Grids differ.
    AbsoluteContinuityViolation
        The target charges cells outside the source support.
    """
    if not isinstance(spec, ShiftSpec):
        spec = ShiftSpec(ShiftKind.parse(spec), transform=transform)
    bad = check_absolute_continuity(source, target)
    if bad:
        raise AbsoluteContinuityViolation(bad)
    kind = spec.kind
    check = {
        ShiftKind.PRIOR: _check_prior,
        ShiftKind.COVARIATE: _check_covariate,
        ShiftKind.FJS: _check_fjs,
    }.get(kind)
    if check is not None:
        return check(source, target, tol)
    return _check_stratified(source, target, spec.transform, kind, tol)


def _check_prior(P, Q, tol):
    py, qy = P.class_mass, Q.class_mass
    live = np.nonzero((py > ZERO_TOL) & (qy > ZERO_TOL))[0]
    cells, lhs, rhs = [], [], []
    for y in live:
        a = P.mass[:, y] / py[y]
        b = Q.mass[:, y] / qy[y]
        keep = (P.mass[:, y] > ZERO_TOL) | (Q.mass[:, y] > ZERO_TOL)
        for i in np.nonzero(keep)[0]:
            cells.append((P.features[i], int(y)))
            lhs.append(a[i])
            rhs.append(b[i])
    return verdict_from(cells, lhs, rhs, tol, "prior")


def _check_covariate(P, Q, tol):
    px, qx = P.feature_mass, Q.feature_mass
    live = np.nonzero((px > ZERO_TOL) & (qx > ZERO_TOL))[0]
    a = P.mass[live] / px[live, None]
    b = Q.mass[live] / qx[live, None]
    cells = [(P.features[i], y) for i in live for y in range(P.n_classes)]
    return verdict_from(cells, a.ravel(), b.ravel(), tol, "covariate")


def _check_stratified(P, Q, transform, kind, tol):
    codes = transform.codes_for(P.features)
    pa, qa = stratum_mass(P, transform), stratum_mass(Q, transform)
    cells, lhs, rhs = [], [], []
    if kind is ShiftKind.SJS:
        pden, qden = pa[codes], qa[codes]
        ok = (pden > ZERO_TOL) & (qden > ZERO_TOL) & ((P.mass > ZERO_TOL) | (Q.mass > ZERO_TOL))
        for i, y in zip(*np.nonzero(ok)):
            cells.append((P.features[i], int(y)))
            lhs.append(P.mass[i, y] / pden[i, y])
            rhs.append(Q.mass[i, y] / qden[i, y])
    elif kind is ShiftKind.SCS:
        pt, qt = pa.sum(axis=1)[codes], qa.sum(axis=1)[codes]
        ok = ((pt > ZERO_TOL) & (qt > ZERO_TOL))[:, None] & ((P.mass > ZERO_TOL) | (Q.mass > ZERO_TOL))
        for i, y in zip(*np.nonzero(ok)):
            cells.append((P.features[i], int(y)))
            lhs.append(P.mass[i, y] / pt[i])
            rhs.append(Q.mass[i, y] / qt[i])
    elif kind is ShiftKind.CDI:
        pt, qt = pa.sum(axis=1)[codes], qa.sum(axis=1)[codes]
        px, qx = P.feature_mass, Q.feature_mass
        ok = (pt > ZERO_TOL) & (qt > ZERO_TOL) & ((px > ZERO_TOL) | (qx > ZERO_TOL))
        for i in np.nonzero(ok)[0]:
            cells.append((P.features[i],))
            lhs.append(px[i] / pt[i])
            rhs.append(qx[i] / qt[i])
    else:  # pragma: no cover - guarded by ShiftKind
        raise ValidationError(f"not a stratified kind: {kind}")
    return verdict_from(cells, lhs, rhs, tol, kind.value)


def _check_fjs(P, Q, tol):
    w = importance_weights(P, Q).joint
    sup = P.support()
    pos = sup & (w > 0)
    rows_live = pos.any(axis=1)
    cols_live = pos.any(axis=0)
    py, qy = P.class_mass, Q.class_mass
    cells, lhs, rhs, dev = [], [], [], []

    # a zero weight inside a live row and a live column cannot be a product u(x) v(y)
    for i, y in zip(*np.nonzero(sup & ~pos & rows_live[:, None] & cols_live[None, :])):
        cells.append((P.features[i], int(y)))
        lhs.append(0.0)
        rhs.append(1.0)
        dev.append(1.0)

    live_cols = np.nonzero(cols_live)[0]
    if live_cols.size >= 2:
        ref = live_cols[-1]
        typical = {}
        for j in live_cols[:-1]:
            rows = np.nonzero(pos[:, j] & pos[:, ref])[0]
            if rows.size == 0:
                continue
            # odds of class j against the reference class, target over source, prior-adjusted
            q_odds = (Q.mass[rows, j] / Q.mass[rows, ref]) * (qy[ref] / qy[j])
            p_odds = (P.mass[rows, j] / P.mass[rows, ref]) * (py[ref] / py[j])
            ratio = q_odds / p_odds
            hi, lo = ratio.max(), ratio.min()
            centre = 0.5 * (hi + lo)
            typical[j] = float(np.median(w[rows, j] / w[rows, ref]))
            for k, r in enumerate(rows):
                cells.append((P.features[r], int(j)))
                lhs.append(float(q_odds[k]))
                rhs.append(float(centre * p_odds[k]))
                dev.append(abs(ratio[k] - centre) / centre)
        typical[ref] = 1.0
        # rows lacking the reference cell are compared pairwise through the typical ratios
        for i in np.nonzero(rows_live & ~pos[:, ref])[0]:
            present = [j for j in live_cols if pos[i, j] and j in typical]
            for a, b in zip(present[:-1], present[1:]):
                obs = w[i, a] / w[i, b]
                exp = typical[a] / typical[b]
                cells.append((P.features[i], int(a)))
                lhs.append(float(obs))
                rhs.append(float(exp))
                dev.append(abs(obs / exp - 1.0))
    return verdict_from(cells, lhs, rhs, tol, "fjs", deviation=dev)


# ---------------------------------------------------------------------------
# helpers


def _require(spec, *names):
    missing = [n for n in names if getattr(spec, n) is None]
    if missing:
        raise ValidationError(f"{spec.kind.value} shift spec lacks {', '.join(missing)}")


def _as_pmf(obj, labels) -> CategoricalDistribution:
    if isinstance(obj, CategoricalDistribution):
        return obj
    return CategoricalDistribution(tuple(labels), obj)


def _class_pmf(source, priors) -> np.ndarray:
    pmf = _as_pmf(priors, source.classes)
    if len(pmf) != source.n_classes:
        raise ShapeMismatch(f"expected {source.n_classes} class priors, got {len(pmf)}")
    return pmf.aligned(source.classes)


def _feature_pmf(source, pmf) -> np.ndarray:
    return _as_pmf(pmf, source.features).aligned(source.features)


def _stratum_rows(table: ConditionalTable, transform, n_classes, needed) -> np.ndarray:
    if len(table.outcomes) != n_classes:
        raise ShapeMismatch(f"stratum posteriors have {len(table.outcomes)} classes, expected {n_classes}")
    order = [table.conditions.index(lev) for lev in transform.levels]
    rows = table.rows[order].copy()
    defined = table.defined[order]
    if np.any(needed & ~defined):
        raise ValidationError("stratum posteriors undefined for a stratum with target mass")
    rows[~defined] = 0.0
    return rows
