"""Class prior estimators and posterior correction formulas.

All estimators work on exact distribution objects. The empirical variants
take a :class:`SampleSet` (or distributions fitted from one, see
:mod:`priorshift.harness`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import solvers
from .core import (
    ZERO_TOL,
    CategoricalDistribution,
    Classifier,
    ConditionalTable,
    FeatureTransform,
    JointDistribution,
    check_feature_weights,
    posteriors,
    stratum_mass,
)
from .errors import (
    EmptySample,
    EmptyStratum,
    InconsistentSystem,
    NoConvergence,
    ShapeMismatch,
    SingularStratum,
    UndefinedPosteriorMass,
    UnsupportedStratum,
    ValidationError,
    ZeroDenominator,
)
from .solvers import SolverConfig
from .synthesis import FjsFactors, fjs_solve_rho  # noqa: F401  (re-exported)

#: relative singular value threshold for numerical rank
RANK_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class PriorEstimate:
    """Estimated target class priors plus solver diagnostics."""

    priors: CategoricalDistribution
    method: str
    diagnostics: dict = field(default_factory=dict)
    stratum_posteriors: ConditionalTable | None = None

    def __post_init__(self):
        res = self.diagnostics.get("residual")
        if res is not None and res < 0:
            raise ValidationError("residual must be non-negative")

    @property
    def mass(self) -> np.ndarray:
        return self.priors.mass

    def to_dict(self) -> dict:
        d = {
            "method": self.method,
            "priors": self.priors.mass.tolist(),
            "diagnostics": _jsonable(self.diagnostics),
        }
        if self.stratum_posteriors is not None:
            d["stratum_posteriors"] = _jsonable(self.stratum_posteriors.to_dict())
        return d


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Labelled source sample and unlabelled target sample over a declared feature space.

    Samples are stored as integer indices into ``features``; labels are class
    indices. Either part may be empty.
    """

    features: tuple
    n_classes: int | None
    labeled_x: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    labeled_y: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    target_x: np.ndarray = field(default_factory=lambda: np.zeros(0, int))

    def __post_init__(self):
        k = len(self.features)
        lx = np.asarray(self.labeled_x, dtype=np.int64).ravel()
        ly = np.asarray(self.labeled_y, dtype=np.int64).ravel()
        tx = np.asarray(self.target_x, dtype=np.int64).ravel()
        if lx.shape != ly.shape:
            raise ValidationError("labelled features and labels differ in length")
        for arr, what in ((lx, "labelled"), (tx, "target")):
            if arr.size and (arr.min() < 0 or arr.max() >= k):
                raise ValidationError(f"{what} sample refers to features outside the declared space")
        if ly.size:
            if self.n_classes is None:
                raise ValidationError("a labelled sample needs n_classes")
            if ly.min() < 0 or ly.max() >= self.n_classes:
                raise ValidationError("labels outside 0..n_classes-1")
        for name, arr in (("labeled_x", lx), ("labeled_y", ly), ("target_x", tx)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "features", tuple(self.features))

    @property
    def m(self) -> int:
        return int(self.labeled_x.size)

    @property
    def n(self) -> int:
        return int(self.target_x.size)

    @classmethod
    def from_records(cls, features: Sequence, n_classes: int | None, labeled=(), unlabeled=()) -> SampleSet:
        """Build from ``(feature, class)`` pairs and a sequence of target feature ids."""
        features = tuple(features)
        pos = {f: i for i, f in enumerate(features)}
        try:
            lx = [pos[f] for f, _ in labeled]
            tx = [pos[f] for f in unlabeled]
        except KeyError as exc:
            raise ValidationError(f"feature {exc.args[0]!r} not in the declared feature space") from None
        ly = [int(y) for _, y in labeled]
        return cls(features, n_classes, lx, ly, tx)

    def merge(self, other: SampleSet) -> SampleSet:
        """Concatenate both parts of two sample sets over the same space."""
        if self.features != other.features:
            raise ShapeMismatch("sample sets use different feature spaces")
        n_classes = self.n_classes if self.n_classes is not None else other.n_classes
        return SampleSet(
            self.features,
            n_classes,
            np.concatenate([self.labeled_x, other.labeled_x]),
            np.concatenate([self.labeled_y, other.labeled_y]),
            np.concatenate([self.target_x, other.target_x]),
        )


# ---------------------------------------------------------------------------
# covariate shift family


def classify_and_count(
    cls: Classifier,
    target_features: CategoricalDistribution,
    n_classes: int | None = None,
) -> PriorEstimate:
    """Target mass of each decision region.

    This is the large-sample limit of counting predictions on the target
    sample. It estimates ``Q[X in C_y]``, which differs from ``Q[Y = y]``
    unless the classifier is perfect on the target, so it is biased under
    essentially every shift and is kept as a baseline.
    """
    pred = cls.predictions_for(target_features.labels)
    if n_classes is None:
        n_classes = max(2, int(pred.max()) + 1)
    if pred.max() >= n_classes:
        raise ValidationError(f"classifier predicts class {pred.max()} but n_classes is {n_classes}")
    mass = np.bincount(pred, weights=target_features.mass, minlength=n_classes)
    return PriorEstimate(
        CategoricalDistribution.normalized(range(n_classes), mass), "classify_and_count"
    )


def _target_on(table: ConditionalTable, target_features) -> np.ndarray:
    if isinstance(target_features, CategoricalDistribution):
        return target_features.aligned(table.conditions)
    qx = np.asarray(target_features, dtype=float)
    if qx.shape != (len(table.conditions),):
        raise ShapeMismatch("target feature vector does not match the posterior table")
    return qx


def pcc(source_posteriors: ConditionalTable, target_features) -> PriorEstimate:
    """Probabilistic classify and count: source posteriors averaged over the target features.

    Exact under covariate shift by the law of total probability.

    Raises
    ------
    UndefinedPosteriorMass
        The target charges a feature whose source posterior is undefined.
    """
    qx = _target_on(source_posteriors, target_features)
    bad = (qx > ZERO_TOL) & ~source_posteriors.defined
    if np.any(bad):
        raise UndefinedPosteriorMass(
            f"target mass on features without source posteriors: "
            f"{[source_posteriors.conditions[i] for i in np.nonzero(bad)[0]]}"
        )
    rows = np.where(source_posteriors.defined[:, None], source_posteriors.rows, 0.0)
    mass = qx @ rows
    return PriorEstimate(CategoricalDistribution.normalized(source_posteriors.outcomes, mass), "pcc")


def reweighting(source: JointDistribution, w_x) -> PriorEstimate:
    """Exact reweighting estimator ``Q[Y = y] = E_P[w_X(X) 1{Y = y}]``."""
    w = check_feature_weights(source, w_x)
    raw = w @ source.mass
    return PriorEstimate(
        CategoricalDistribution.normalized(source.classes, raw),
        "reweighting",
        {"raw": raw.tolist(), "raw_total": float(raw.sum())},
    )


def reweighting_emp(samples: SampleSet, w_x) -> PriorEstimate:
    """Sample version: ``(1/m) sum_i w_X(x_i) 1{y_i = y}``.

    The raw vector need not sum to one; it is reported in the diagnostics
    next to the normalised priors.
    """
    if samples.m == 0:
        raise EmptySample("reweighting needs a non-empty labelled sample")
    w = np.asarray(w_x, dtype=float)
    if w.shape != (len(samples.features),) or np.any(w < 0):
        raise ValidationError("feature weights must be non-negative, one per feature")
    raw = np.bincount(samples.labeled_y, weights=w[samples.labeled_x], minlength=samples.n_classes) / samples.m
    total = raw.sum()
    if total <= 0:
        raise ZeroDenominator("all sampled weights are zero")
    return PriorEstimate(
        CategoricalDistribution(range(samples.n_classes), raw / total),
        "reweighting_emp",
        {"raw": raw.tolist(), "raw_total": float(total), "m": samples.m},
    )


def stratum_posterior_covariate(source: JointDistribution, w_x, transform: FeatureTransform) -> ConditionalTable:
    """Target class posteriors per stratum under covariate shift.

    ``E_P[w_X 1{Y=y} | T = t] / E_P[w_X | T = t]``; needs no sufficiency of
    ``T``. Strata without weighted source mass are undefined.
    """
    w = check_feature_weights(source, w_x)
    codes = transform.codes_for(source.features)
    num = np.zeros((transform.n_strata, source.n_classes))
    np.add.at(num, codes, w[:, None] * source.mass)
    den = num.sum(axis=1)
    demanded = np.bincount(codes, weights=w, minlength=transform.n_strata)
    empty = (den <= ZERO_TOL) & (demanded > 0)
    if np.any(empty):
        raise EmptyStratum(f"positive weight on strata without source mass: {[transform.levels[i] for i in np.nonzero(empty)[0]]}")
    return ConditionalTable.from_weights(transform.levels, source.classes, num)


# ---------------------------------------------------------------------------
# prior shift / FJS family


def _em_inputs(source_posteriors, source_priors, target_features):
    qx = _target_on(source_posteriors, target_features)
    p = (
        source_priors.aligned(source_posteriors.outcomes)
        if isinstance(source_priors, CategoricalDistribution)
        else np.asarray(source_priors, dtype=float)
    )
    if p.shape != (len(source_posteriors.outcomes),):
        raise ShapeMismatch("source priors do not match the posterior table")
    bad = (qx > ZERO_TOL) & ~source_posteriors.defined
    if np.any(bad):
        raise UndefinedPosteriorMass("target mass on features without source posteriors")
    live = qx > ZERO_TOL
    active = p > ZERO_TOL
    post = source_posteriors.rows[live][:, active]
    weights = qx[live] / qx[live].sum()
    return post, p, active, weights, qx


def em_label_shift(
    source_posteriors: ConditionalTable,
    source_priors,
    target_features,
    cfg: SolverConfig | None = None,
) -> PriorEstimate:
    """Maximum likelihood target priors under prior probability shift (EM).

    Iterates ``q_j <- sum_x q_X(x) (q_j/p_j) post_j(x) / sum_i (q_i/p_i) post_i(x)``
    from uniform priors until one step changes no prior by more than
    ``cfg.tol``. With ``cfg.accelerate`` the iteration is extrapolated with
    SQUAREM and with ``cfg.polish`` an interior solution is refined by Newton
    steps on the same likelihood; neither alters the fixed point.

    Raises
    ------
    NoConvergence
        Iteration cap reached first.
    DegenerateInit
        ``cfg.init`` has a zero entry.
    """
    cfg = cfg or SolverConfig()
    post, p, active, weights, qx = _em_inputs(source_posteriors, source_priors, target_features)
    init = None if cfg.init is None else np.asarray(cfg.init, dtype=float)[active]
    q_act, info = solvers.em_fixed_point(post, p[active], weights, cfg, init)
    q = np.zeros_like(p)
    q[active] = q_act
    rows = np.where(source_posteriors.defined[:, None], source_posteriors.rows, 0.0)
    info["residual"] = solvers.system_residual(rows, qx, p, q, np.ones_like(p)) if active.all() else float("nan")
    return PriorEstimate(CategoricalDistribution.normalized(source_posteriors.outcomes, q), "em", info)


def fjs_solve_q(
    source: JointDistribution,
    target_features,
    rho,
    cfg: SolverConfig | None = None,
) -> PriorEstimate:
    """Target priors solving the FJS system for fixed scale constants ``rho``.

    With ``rho`` fixed the system is the stationarity condition of a
    label-shift likelihood whose source priors are ``p_j / rho_j``, so the
    EM engine of :func:`em_label_shift` is reused; ``rho == 1`` reproduces
    it exactly.

    Raises
    ------
    NoConvergence
        The iteration stalls, or its limit lies on the boundary of the
        simplex where the system is not satisfied.
    """
    cfg = cfg or SolverConfig()
    p = source.class_mass
    rho_full = solvers.full_rho(rho, source.n_classes)
    table = posteriors(source)
    post, _, active, weights, qx = _em_inputs(table, p, target_features)
    init = None if cfg.init is None else np.asarray(cfg.init, dtype=float)[active]
    q_act, info = solvers.em_fixed_point(post, (p / rho_full)[active], weights, cfg, init)
    q = np.zeros_like(p)
    q[active] = q_act
    rows = np.nan_to_num(table.rows)
    res = solvers.system_residual(rows, qx, p, q, rho_full)
    info["residual"] = res
    info["rho"] = rho_full[:-1].tolist()
    info["boundary"] = bool(np.any(q <= 1e-9))
    if not res < cfg.tol:
        raise NoConvergence(
            f"the FJS system is not satisfied at the iteration limit (residual {res:.3g}); "
            "no solution in the interior of the simplex for these constants"
        )
    return PriorEstimate(CategoricalDistribution.normalized(source.classes, q), "fjs_q", info)


def fjs_posterior_correction(
    source_posteriors: ConditionalTable,
    source_priors,
    target_priors,
    rho,
) -> ConditionalTable:
    """Target posteriors from source posteriors under FJS.

    ``Q[Y=j | x]`` is proportional to ``rho_j (q_j / p_j) P[Y=j | x]`` with
    ``rho`` of the last class equal to 1. Undefined source rows stay undefined.
    """
    n = len(source_posteriors.outcomes)
    p = _prob_vector(source_priors, source_posteriors.outcomes)
    q = _prob_vector(target_priors, source_posteriors.outcomes)
    if np.any(p <= 0) or np.any(q <= 0):
        raise ValidationError("source and target priors must be strictly positive")
    rho_full = solvers.full_rho(rho, n)
    return _reweight_rows(source_posteriors, np.broadcast_to(rho_full * q / p, source_posteriors.rows.shape))


def sjs_posterior_correction(
    source_posteriors: ConditionalTable,
    transform: FeatureTransform,
    source_stratum_posteriors: ConditionalTable,
    target_stratum_posteriors: ConditionalTable,
) -> ConditionalTable:
    """Target posteriors from source posteriors under T-SJS.

    Each source posterior is multiplied by the ratio of target to source
    class posteriors of its stratum and the row renormalised. Rows in strata
    without target mass are undefined.
    """
    codes = transform.codes_for(source_posteriors.conditions)
    src = _stratum_table(source_stratum_posteriors, transform)
    tgt = _stratum_table(target_stratum_posteriors, transform)
    s_rows, s_def = src
    t_rows, t_def = tgt
    both = s_def & t_def
    if np.any((t_rows > ZERO_TOL) & (s_rows <= ZERO_TOL) & both[:, None]):
        raise ValidationError("target stratum posterior positive where the source one vanishes")
    ratio = np.zeros_like(s_rows)
    ok = both[:, None] & (s_rows > ZERO_TOL)
    ratio[ok] = t_rows[ok] / s_rows[ok]
    table = ConditionalTable(
        source_posteriors.conditions,
        source_posteriors.outcomes,
        source_posteriors.rows,
        source_posteriors.defined & both[codes],
    )
    return _reweight_rows(table, ratio[codes])


def _reweight_rows(table: ConditionalTable, factors) -> ConditionalTable:
    rows = np.where(table.defined[:, None], table.rows, 0.0) * factors
    den = rows.sum(axis=1)
    zero = table.defined & (den <= 0)
    if np.any(zero):
        raise ZeroDenominator(f"reweighted posteriors vanish at {[table.conditions[i] for i in np.nonzero(zero)[0]]}")
    out = np.full(rows.shape, np.nan)
    out[table.defined] = rows[table.defined] / den[table.defined, None]
    return ConditionalTable(table.conditions, table.outcomes, out, table.defined)


# ---------------------------------------------------------------------------
# sparse joint shift: conditional confusion matrices


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def ccm_estimate(
    source: JointDistribution,
    target_features,
    transform: FeatureTransform,
    cls: Classifier,
    cfg: SolverConfig | None = None,
) -> PriorEstimate:
    """Conditional confusion matrix estimator under T-SJS.

    For every stratum ``t`` with target mass, solves
    ``sum_y q[y,t] P[X in C_j | Y=y, T=t] = Q[X in C_j | T=t]`` for the
    stratum posteriors ``q[., t]`` and combines them with the target stratum
    weights. Classes absent from a stratum under the source are absent under
    the target as well and are dropped from that stratum's system.

    Solutions are projected onto the simplex; if the projection moves the
    solution, or leaves a residual, by more than ``cfg.projection_tol`` the
    system is declared inconsistent.

    Raises
    ------
    SingularStratum
        A stratum's confusion matrix is rank deficient.
    InconsistentSystem
        See above.
    UnsupportedStratum
        Target mass on a stratum without source mass.
    """
    cfg = cfg or SolverConfig()
    qx = _as_feature_vector(source, target_features)
    codes = transform.codes_for(source.features)
    ell = source.n_classes
    ind = cls.indicators(source.features, ell)  # (ell, K)
    agg = stratum_mass(source, transform)
    qt = np.bincount(codes, weights=qx, minlength=transform.n_strata)

    rows = np.full((transform.n_strata, ell), np.nan)
    defined = np.zeros(transform.n_strata, bool)
    per_stratum = {}
    for t, level in enumerate(transform.levels):
        if qt[t] <= ZERO_TOL:
            continue
        if agg[t].sum() <= ZERO_TOL:
            raise UnsupportedStratum(f"target mass on stratum {level!r} which has no source mass")
        members = codes == t
        present = np.nonzero(agg[t] > ZERO_TOL)[0]
        # confusion[j, y] = P[X in C_j | Y = y, T = t]
        confusion = ind[:, members] @ source.mass[members][:, present] / agg[t, present]
        rates = ind[:, members] @ qx[members] / qt[t]
        sv = np.linalg.svd(confusion, compute_uv=False)
        rank = int(np.sum(sv > RANK_RTOL * sv[0])) if sv[0] > 0 else 0
        if rank < present.size:
            raise SingularStratum(level, rank, present.size)
        sol = np.linalg.lstsq(confusion, rates, rcond=None)[0]
        proj = project_simplex(sol)
        displacement = float(np.abs(proj - sol).max())
        residual = float(np.abs(confusion @ proj - rates).max())
        if max(displacement, residual) > cfg.projection_tol:
            raise InconsistentSystem(
                f"stratum {level!r}: projected solution off by {max(displacement, residual):.3g} "
                f"> projection tolerance {cfg.projection_tol:g}"
            )
        full = np.zeros(ell)
        full[present] = proj
        rows[t] = full / full.sum()
        defined[t] = True
        per_stratum[level] = {
            "rank": rank,
            "condition": float(sv[0] / sv[-1]),
            "residual": residual,
            "displacement": displacement,
            "projected": displacement > 0,
        }

    priors = qt[defined] @ rows[defined]
    table = ConditionalTable(transform.levels, source.classes, rows, defined)
    diag = {
        "per_stratum": per_stratum,
        "residual": max((s["residual"] for s in per_stratum.values()), default=0.0),
    }
    return PriorEstimate(CategoricalDistribution.normalized(source.classes, priors), "ccm", diag, table)


# ---------------------------------------------------------------------------
# helpers


def _prob_vector(obj, labels) -> np.ndarray:
    if isinstance(obj, CategoricalDistribution):
        return obj.aligned(labels)
    arr = np.asarray(obj, dtype=float)
    if arr.shape != (len(labels),):
        raise ShapeMismatch(f"expected {len(labels)} entries, got shape {arr.shape}")
    return arr


def _as_feature_vector(source: JointDistribution, target_features) -> np.ndarray:
    qx = _prob_vector(target_features, source.features)
    if np.any(qx < 0) or abs(qx.sum() - 1.0) > 1e-10:
        raise ValidationError("target feature distribution must be a probability vector")
    return qx


def _stratum_table(table: ConditionalTable, transform: FeatureTransform):
    if set(table.conditions) != set(transform.levels):
        raise ShapeMismatch("stratum posteriors must be indexed by the transform's strata")
    order = [table.conditions.index(lev) for lev in transform.levels]
    rows = np.nan_to_num(table.rows[order])
    return rows, table.defined[order]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if np.isfinite(f) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj
