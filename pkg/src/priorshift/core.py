"""Finite joint distributions of features and labels.

Everything here works with respect to counting measure on an enumerated
feature space, so densities are plain probability tables and every
"almost surely" statement reduces to a finite check over support cells.

Classes are indexed ``0 .. n_classes - 1``. Feature identifiers are arbitrary
hashables (strings in the JSON format).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    AbsoluteContinuityViolation,
    InvalidDistribution,
    ShapeMismatch,
    UndefinedRow,
    ValidationError,
)

#: normalisation tolerance checked at construction
NORM_TOL = 1e-12
#: default tolerance for identities between two distributions
IDENTITY_TOL = 1e-10
#: probabilities at or below this count as zero when determining support
ZERO_TOL = 1e-15


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=float)
    arr.setflags(write=False)
    return arr


def _check_pmf(mass: np.ndarray, what: str, tol: float = NORM_TOL) -> None:
    if not np.all(np.isfinite(mass)):
        raise InvalidDistribution(f"{what}: non-finite entries")
    if np.any(mass < 0):
        raise InvalidDistribution(f"{what}: negative entries (min {mass.min():.3g})")
    total = float(mass.sum())
    if abs(total - 1.0) > tol:
        raise InvalidDistribution(f"{what}: total mass {total!r} differs from 1 by more than {tol:g}")


def _unique(labels: Sequence, what: str) -> tuple:
    labels = tuple(labels)
    if len(set(labels)) != len(labels):
        raise InvalidDistribution(f"{what}: duplicate identifiers")
    return labels


@dataclass(frozen=True, eq=False)
class CategoricalDistribution:
    """Probability vector over a finite, labelled outcome set."""

    labels: tuple
    mass: np.ndarray

    def __post_init__(self):
        labels = _unique(self.labels, "CategoricalDistribution.labels")
        mass = _frozen(self.mass)
        if mass.ndim != 1 or mass.shape[0] != len(labels):
            raise InvalidDistribution(
                f"CategoricalDistribution: mass shape {mass.shape} does not match {len(labels)} labels"
            )
        if len(labels) == 0:
            raise InvalidDistribution("CategoricalDistribution: empty outcome set")
        _check_pmf(mass, "CategoricalDistribution")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def normalized(cls, labels: Sequence, weights, tol: float = IDENTITY_TOL) -> CategoricalDistribution:
        """Build from weights whose sum is within ``tol`` of one, renormalising."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not np.isfinite(total) or abs(total - 1.0) > tol:
            raise InvalidDistribution(f"weights sum to {total!r}, not 1 within {tol:g}")
        return cls(labels, w / total)

    @classmethod
    def uniform(cls, labels: Sequence) -> CategoricalDistribution:
        labels = tuple(labels)
        return cls(labels, np.full(len(labels), 1.0 / len(labels)))

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, label) -> float:
        return float(self.mass[self.labels.index(label)])

    def support(self) -> np.ndarray:
        return self.mass > ZERO_TOL

    def aligned(self, labels: Sequence) -> np.ndarray:
        """Mass vector reordered to ``labels``; the label sets must coincide."""
        labels = tuple(labels)
        if labels == self.labels:
            return self.mass
        if set(labels) != set(self.labels) or len(labels) != len(self.labels):
            raise ShapeMismatch(f"label sets differ: {self.labels} vs {labels}")
        return self.mass[[self.labels.index(lab) for lab in labels]]

    def to_dict(self) -> dict:
        return {"labels": list(self.labels), "mass": self.mass.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> CategoricalDistribution:
        try:
            return cls(tuple(d["labels"]), d["mass"])
        except KeyError as exc:
            raise InvalidDistribution(f"categorical distribution JSON lacks key {exc}") from None

    def __repr__(self) -> str:
        return f"CategoricalDistribution({dict(zip(self.labels, self.mass.round(6).tolist()))})"


@dataclass(frozen=True, eq=False)
class JointDistribution:
    """Exact probability table over (feature, class) cells.

    Parameters
    ----------
    features : sequence of hashable
        Identifiers of the K feature points, in row order.
    mass : array-like, shape (K, n_classes)
        Cell probabilities. Must be non-negative and sum to one within 1e-12.
    """

    features: tuple
    mass: np.ndarray

    def __post_init__(self):
        features = _unique(self.features, "JointDistribution.features")
        mass = _frozen(self.mass)
        if mass.ndim != 2:
            raise InvalidDistribution(f"JointDistribution: mass must be 2-D, got shape {mass.shape}")
        if mass.shape[0] != len(features) or len(features) < 1:
            raise InvalidDistribution(
                f"JointDistribution: {mass.shape[0]} rows for {len(features)} features"
            )
        if mass.shape[1] < 2:
            raise InvalidDistribution("JointDistribution: need at least two classes")
        _check_pmf(mass, "JointDistribution")
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "mass", mass)

    @classmethod
    def normalized(cls, features: Sequence, weights, tol: float = IDENTITY_TOL) -> JointDistribution:
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if not np.isfinite(total) or abs(total - 1.0) > tol:
            raise InvalidDistribution(f"joint weights sum to {total!r}, not 1 within {tol:g}")
        return cls(features, w / total)

    @property
    def n_features(self) -> int:
        return self.mass.shape[0]

    @property
    def n_classes(self) -> int:
        return self.mass.shape[1]

    @property
    def classes(self) -> tuple:
        return tuple(range(self.n_classes))

    @property
    def feature_mass(self) -> np.ndarray:
        return self.mass.sum(axis=1)

    @property
    def class_mass(self) -> np.ndarray:
        return self.mass.sum(axis=0)

    def support(self) -> np.ndarray:
        return self.mass > ZERO_TOL

    def index(self, feature) -> int:
        try:
            return self.features.index(feature)
        except ValueError:
            raise ValidationError(f"unknown feature {feature!r}") from None

    def same_grid(self, other: JointDistribution) -> None:
        if self.features != other.features or self.n_classes != other.n_classes:
            raise ShapeMismatch(
                f"grids differ: {len(self.features)}x{self.n_classes} "
                f"vs {len(other.features)}x{other.n_classes} (or feature order)"
            )

    def to_dict(self) -> dict:
        return {"features": list(self.features), "classes": self.n_classes, "mass": self.mass.tolist()}

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: Mapping) -> JointDistribution:
        for key in ("features", "classes", "mass"):
            if key not in d:
                raise InvalidDistribution(f"joint distribution JSON lacks key '{key}'")
        mass = np.asarray(d["mass"], dtype=float)
        n_classes = d["classes"]
        if isinstance(n_classes, (list, tuple)):
            # an explicit class list must be the 0-based indices
            if list(n_classes) != list(range(len(n_classes))):
                raise InvalidDistribution("'classes' must be a count or the list 0..n_classes-1")
            n_classes = len(n_classes)
        if mass.ndim != 2 or mass.shape[1] != n_classes:
            raise InvalidDistribution(
                f"'mass' has shape {mass.shape} but 'classes' is {d['classes']}"
            )
        return cls(tuple(d["features"]), mass)

    @classmethod
    def from_json(cls, text: str) -> JointDistribution:
        return cls.from_dict(json.loads(text))

    def __repr__(self) -> str:
        return f"JointDistribution(K={self.n_features}, classes={self.n_classes})"


@dataclass(frozen=True, eq=False)
class ConditionalTable:
    """Rows of conditional probability vectors, one per conditioning value.

    Rows whose conditioning event has zero mass are undefined: their entries
    are NaN and ``defined`` is False for them.
    """

    conditions: tuple
    outcomes: tuple
    rows: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        rows = np.array(self.rows, dtype=float)
        defined = np.array(self.defined, dtype=bool)
        if rows.shape != (len(self.conditions), len(self.outcomes)):
            raise InvalidDistribution(
                f"ConditionalTable: rows shape {rows.shape} vs "
                f"{len(self.conditions)}x{len(self.outcomes)}"
            )
        if defined.shape != (len(self.conditions),):
            raise InvalidDistribution("ConditionalTable: defined flags have the wrong length")
        rows[~defined] = np.nan
        d = rows[defined]
        if d.size:
            if not np.all(np.isfinite(d)) or np.any(d < 0):
                raise InvalidDistribution("ConditionalTable: defined rows must be finite and non-negative")
            worst = np.abs(d.sum(axis=1) - 1.0).max()
            if worst > NORM_TOL:
                raise InvalidDistribution(f"ConditionalTable: a defined row sums to 1{worst:+.3g}")
        rows.setflags(write=False)
        defined.setflags(write=False)
        object.__setattr__(self, "conditions", tuple(self.conditions))
        object.__setattr__(self, "outcomes", tuple(self.outcomes))
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "defined", defined)

    @classmethod
    def from_rows(cls, conditions: Sequence, outcomes: Sequence, rows) -> ConditionalTable:
        """All rows defined; each is renormalised if within 1e-10 of summing to one."""
        rows = np.asarray(rows, dtype=float)
        sums = rows.sum(axis=1, keepdims=True)
        if np.any(np.abs(sums - 1.0) > IDENTITY_TOL):
            raise InvalidDistribution("ConditionalTable.from_rows: a row does not sum to 1")
        return cls(tuple(conditions), tuple(outcomes), rows / sums, np.ones(len(rows), bool))

    @classmethod
    def from_weights(cls, conditions: Sequence, outcomes: Sequence, weights) -> ConditionalTable:
        """Normalise each row of non-negative weights; all-zero rows become undefined."""
        weights = np.asarray(weights, dtype=float)
        totals = weights.sum(axis=1)
        defined = totals > ZERO_TOL
        rows = np.full(weights.shape, np.nan)
        rows[defined] = weights[defined] / totals[defined, None]
        return cls(tuple(conditions), tuple(outcomes), rows, defined)

    def row(self, condition) -> np.ndarray:
        i = self.conditions.index(condition)
        if not self.defined[i]:
            raise UndefinedRow(f"conditional row for {condition!r} is undefined (zero mass)")
        return self.rows[i]

    def to_dict(self) -> dict:
        return {
            "conditions": list(self.conditions),
            "outcomes": list(self.outcomes),
            "rows": [r.tolist() if ok else None for r, ok in zip(self.rows, self.defined)],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ConditionalTable:
        rows = d["rows"]
        n_out = len(d["outcomes"])
        defined = [r is not None for r in rows]
        arr = np.array([r if r is not None else [np.nan] * n_out for r in rows], dtype=float)
        return cls(tuple(d["conditions"]), tuple(d["outcomes"]), arr, defined)


@dataclass(frozen=True, eq=False)
class ImportanceWeights:
    """Joint weights ``q/p`` per cell and feature weights ``q_X/p_X`` per feature."""

    joint: np.ndarray
    feature: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joint", _frozen(self.joint))
        object.__setattr__(self, "feature", _frozen(self.feature))


@dataclass(frozen=True, eq=False)
class FeatureTransform:
    """A map from feature points onto a finite set of strata.

    ``levels`` lists the distinct strata in order of first appearance and
    ``codes[k]`` is the level index of ``features[k]``.
    """

    features: tuple
    strata: tuple
    levels: tuple = field(init=False)
    codes: np.ndarray = field(init=False)

    def __post_init__(self):
        features = _unique(self.features, "FeatureTransform.features")
        strata = tuple(self.strata)
        if len(strata) != len(features):
            raise ValidationError("FeatureTransform: every feature needs exactly one stratum")
        if not features:
            raise ValidationError("FeatureTransform: empty feature space")
        levels = tuple(dict.fromkeys(strata))
        lookup = {lev: i for i, lev in enumerate(levels)}
        codes = np.array([lookup[s] for s in strata], dtype=int)
        codes.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "strata", strata)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "codes", codes)

    @classmethod
    def from_mapping(cls, mapping: Mapping[Hashable, Hashable]) -> FeatureTransform:
        return cls(tuple(mapping), tuple(mapping.values()))

    @classmethod
    def constant(cls, features: Iterable, level: Hashable = "all") -> FeatureTransform:
        features = tuple(features)
        return cls(features, (level,) * len(features))

    @classmethod
    def identity(cls, features: Iterable) -> FeatureTransform:
        features = tuple(features)
        return cls(features, features)

    @property
    def n_strata(self) -> int:
        return len(self.levels)

    def __call__(self, feature) -> Hashable:
        return self.strata[self.features.index(feature)]

    def codes_for(self, features: Sequence) -> np.ndarray:
        """Level index of each of ``features`` (any order over the same space)."""
        features = tuple(features)
        if features == self.features:
            return self.codes
        if set(features) != set(self.features) or len(features) != len(self.features):
            raise ShapeMismatch("transform is defined on a different feature space")
        pos = {f: i for i, f in enumerate(self.features)}
        return self.codes[[pos[f] for f in features]]

    def then(self, outer: Mapping[Hashable, Hashable]) -> FeatureTransform:
        """Composition ``outer ∘ self``: a coarsening of this transform."""
        missing = set(self.levels) - set(outer)
        if missing:
            raise ValidationError(f"coarsening map misses strata {sorted(map(str, missing))}")
        return FeatureTransform(self.features, tuple(outer[s] for s in self.strata))

    def to_dict(self) -> dict:
        return {"features": list(self.features), "strata": list(self.strata)}

    @classmethod
    def from_dict(cls, d: Mapping) -> FeatureTransform:
        if "features" in d:
            return cls(tuple(d["features"]), tuple(d["strata"]))
        return cls.from_mapping(d["strata"])


@dataclass(frozen=True, eq=False)
class Classifier:
    """Hard classifier: each feature point is assigned one predicted class."""

    features: tuple
    predictions: np.ndarray

    def __post_init__(self):
        features = _unique(self.features, "Classifier.features")
        pred = np.array(self.predictions, dtype=int)
        if pred.shape != (len(features),):
            raise ValidationError("Classifier: one prediction per feature is required")
        if np.any(pred < 0):
            raise ValidationError("Classifier: class indices must be non-negative")
        pred.setflags(write=False)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "predictions", pred)

    @classmethod
    def from_mapping(cls, mapping: Mapping[Hashable, int]) -> Classifier:
        return cls(tuple(mapping), tuple(mapping.values()))

    @classmethod
    def constant(cls, features: Iterable, label: int = 0) -> Classifier:
        features = tuple(features)
        return cls(features, [label] * len(features))

    @classmethod
    def bayes(cls, joint: JointDistribution) -> Classifier:
        """Predict the class with the largest source posterior (ties to the lowest index)."""
        return cls(joint.features, joint.mass.argmax(axis=1))

    def __call__(self, feature) -> int:
        return int(self.predictions[self.features.index(feature)])

    def predictions_for(self, features: Sequence) -> np.ndarray:
        features = tuple(features)
        if features == self.features:
            return self.predictions
        if set(features) != set(self.features) or len(features) != len(self.features):
            raise ShapeMismatch("classifier is defined on a different feature space")
        pos = {f: i for i, f in enumerate(self.features)}
        return self.predictions[[pos[f] for f in features]]

    def indicators(self, features: Sequence, n_classes: int) -> np.ndarray:
        """Region indicator matrix of shape (n_classes, K)."""
        pred = self.predictions_for(features)
        if pred.size and pred.max() >= n_classes:
            raise ValidationError(f"classifier predicts class {pred.max()} but only {n_classes} exist")
        return (pred[None, :] == np.arange(n_classes)[:, None]).astype(float)

    def to_dict(self) -> dict:
        return {"features": list(self.features), "regions": self.predictions.tolist()}

    @classmethod
    def from_dict(cls, d: Mapping) -> Classifier:
        if "features" in d:
            return cls(tuple(d["features"]), d["regions"])
        return cls.from_mapping(d["regions"])


# ---------------------------------------------------------------------------
# operations


def marginals(joint: JointDistribution) -> tuple[CategoricalDistribution, CategoricalDistribution]:
    """Feature and label marginals of ``joint``."""
    fx = joint.feature_mass
    fy = joint.class_mass
    return (
        CategoricalDistribution(joint.features, fx / fx.sum()),
        CategoricalDistribution(joint.classes, fy / fy.sum()),
    )


def posteriors(joint: JointDistribution) -> ConditionalTable:
    """Class posteriors given each feature point; zero-mass features are undefined."""
    return ConditionalTable.from_weights(joint.features, joint.classes, joint.mass)


def class_conditionals(joint: JointDistribution) -> ConditionalTable:
    """Feature distribution given each class; zero-mass classes are undefined."""
    return ConditionalTable.from_weights(joint.classes, joint.features, joint.mass.T)


def check_absolute_continuity(source: JointDistribution, target: JointDistribution) -> list[tuple]:
    """Cells ``(feature, class)`` where the target has mass but the source has none."""
    source.same_grid(target)
    bad = (target.mass > ZERO_TOL) & ~(source.mass > ZERO_TOL)
    return [(source.features[i], int(j)) for i, j in zip(*np.nonzero(bad))]


def importance_weights(source: JointDistribution, target: JointDistribution) -> ImportanceWeights:
    """Density ratios of target to source, zero off the source support.

    Raises
    ------
    AbsoluteContinuityViolation
        If the target charges a cell the source does not.
    """
    bad = check_absolute_continuity(source, target)
    if bad:
        raise AbsoluteContinuityViolation(bad)
    sup = source.support()
    joint = np.zeros_like(source.mass)
    joint[sup] = target.mass[sup] / source.mass[sup]
    px, qx = source.feature_mass, target.feature_mass
    fsup = px > ZERO_TOL
    feat = np.zeros_like(px)
    feat[fsup] = qx[fsup] / px[fsup]
    return ImportanceWeights(joint, feat)


def stratum_mass(joint: JointDistribution, transform: FeatureTransform) -> np.ndarray:
    """Joint mass aggregated by stratum: shape (n_strata, n_classes)."""
    codes = transform.codes_for(joint.features)
    out = np.zeros((transform.n_strata, joint.n_classes))
    np.add.at(out, codes, joint.mass)
    return out


def stratum_marginal(joint: JointDistribution, transform: FeatureTransform) -> CategoricalDistribution:
    agg = stratum_mass(joint, transform).sum(axis=1)
    return CategoricalDistribution(transform.levels, agg / agg.sum())


def stratum_posteriors(joint: JointDistribution, transform: FeatureTransform) -> ConditionalTable:
    """Class posteriors given the stratum, ``P[Y = y | T(X) = t]``."""
    return ConditionalTable.from_weights(transform.levels, joint.classes, stratum_mass(joint, transform))


def feature_weights_from(source: JointDistribution, target_features: CategoricalDistribution) -> np.ndarray:
    """``q_X / p_X`` for a target feature marginal, zero off the source support."""
    qx = target_features.aligned(source.features)
    px = source.feature_mass
    sup = px > ZERO_TOL
    if np.any(qx[~sup] > ZERO_TOL):
        raise AbsoluteContinuityViolation(
            [(source.features[i],) for i in np.nonzero(~sup & (qx > ZERO_TOL))[0]]
        )
    w = np.zeros_like(px)
    w[sup] = qx[sup] / px[sup]
    return w


def check_feature_weights(source: JointDistribution, w_x, tol: float = IDENTITY_TOL) -> np.ndarray:
    """Validate a feature weight vector against ``source``; returns it as an array."""
    w = np.asarray(w_x, dtype=float)
    if w.shape != (source.n_features,):
        raise ShapeMismatch(f"feature weights have shape {w.shape}, expected ({source.n_features},)")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ValidationError("feature weights must be finite and non-negative")
    px = source.feature_mass
    if np.any(w[px <= ZERO_TOL] > 0):
        raise ValidationError("feature weights must vanish where the source feature mass is zero")
    total = float(w @ px)
    if abs(total - 1.0) > tol:
        raise ValidationError(f"feature weights integrate to {total!r} under the source, not 1")
    return w


def load_json(path) -> Any:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
