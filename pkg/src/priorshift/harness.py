"""Sampling, empirical fitting, CSV ingestion and scenario execution.

Random streams
--------------
Draws use the Philox4x64-10 counter-based generator (``numpy.random.Philox``)
keyed through ``numpy.random.SeedSequence(seed, spawn_key=...)``. Uniforms are
formed from the top 53 bits of each raw 64-bit output, ``(r >> 11) * 2**-53``,
and mapped to cells by inverse CDF over the row-major cell order. Neither
step depends on platform defaults, so ``(distribution, n, seed, stream)``
always yields the same sample. Scenario ``i`` of a batch with master seed
``s`` uses streams ``(i, 0)`` for the labelled and ``(i, 1)`` for the
unlabelled sample.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import diagnostics as diag
from . import estimators as est
from .core import (
    CategoricalDistribution,
    Classifier,
    FeatureTransform,
    JointDistribution,
    feature_weights_from,
    marginals,
    posteriors,
)
from .errors import EmptySample, PriorShiftError, ValidationError
from .estimators import PriorEstimate, SampleSet
from .solvers import EMPIRICAL_PROJECTION_TOL, SolverConfig
from .synthesis import ShiftSpec, synthesize, verify_shift

log = logging.getLogger(__name__)

PRNG_NAME = "philox4x64-10/seedsequence/v1"
DEFAULT_EMPIRICAL_SMOOTHING = 0.5


# ---------------------------------------------------------------------------
# sampling


def uniform_stream(seed, n: int, stream: Sequence[int] = ()) -> np.ndarray:
    """``n`` uniforms in [0, 1) from the documented Philox stream."""
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(s) for s in stream))
    bits = np.random.Philox(ss)
    if n == 0:
        return np.zeros(0)
    raw = bits.random_raw(n)
    return (raw >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def _inverse_cdf(mass: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(mass)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, u, side="right")


def draw_samples(dist, n: int, seed: int, stream: Sequence[int] = ()) -> SampleSet:
    """I.i.d. draws from a joint (labelled part) or feature distribution (target part)."""
    if n < 0:
        raise ValidationError("sample size must be non-negative")
    u = uniform_stream(seed, n, stream)
    if isinstance(dist, JointDistribution):
        cells = _inverse_cdf(dist.mass.ravel(), u)
        x, y = np.divmod(cells, dist.n_classes)
        return SampleSet(dist.features, dist.n_classes, labeled_x=x, labeled_y=y)
    if isinstance(dist, CategoricalDistribution):
        return SampleSet(dist.labels, None, target_x=_inverse_cdf(dist.mass, u))
    raise ValidationError(f"cannot sample from {type(dist).__name__}")


def fit_empirical(samples: SampleSet, smoothing: float = 0.0):
    """Additively smoothed frequency estimates.

    Returns ``(joint, target_features)``; a part is ``None`` when its sample
    is empty. Cell estimates are ``(count + s) / (m + s K n_classes)`` and
    ``(count + s) / (n + s K)``.

    Raises
    ------
    EmptySample
        Both parts are empty.
    """
    if smoothing < 0:
        raise ValidationError("smoothing must be non-negative")
    if samples.m == 0 and samples.n == 0:
        raise EmptySample("both the labelled and the unlabelled sample are empty")
    k = len(samples.features)
    joint = target = None
    if samples.m:
        ell = samples.n_classes
        counts = np.bincount(samples.labeled_x * ell + samples.labeled_y, minlength=k * ell).reshape(k, ell)
        joint = JointDistribution(samples.features, (counts + smoothing) / (samples.m + smoothing * k * ell))
    if samples.n:
        counts = np.bincount(samples.target_x, minlength=k)
        target = CategoricalDistribution(samples.features, (counts + smoothing) / (samples.n + smoothing * k))
    return joint, target


# ---------------------------------------------------------------------------
# CSV files


def read_labeled_csv(path, features: Sequence | None = None):
    """Read a ``feature,label`` CSV; returns ``(records, features, inferred)``."""
    rows = _read_csv(path, ("feature", "label"))
    records = []
    for r in rows:
        try:
            records.append((r["feature"], int(r["label"])))
        except ValueError:
            raise ValidationError(f"{path}: label {r['label']!r} is not an integer class index") from None
    inferred = features is None
    if inferred:
        features = tuple(dict.fromkeys(f for f, _ in records))
    return records, tuple(features), inferred


def read_unlabeled_csv(path, features: Sequence | None = None):
    """Read a ``feature`` CSV; returns ``(ids, features, inferred)``."""
    ids = [r["feature"] for r in _read_csv(path, ("feature",))]
    inferred = features is None
    if inferred:
        features = tuple(dict.fromkeys(ids))
    return ids, tuple(features), inferred


def _read_csv(path, required):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in required):
            raise ValidationError(f"{path}: header must contain columns {', '.join(required)}")
        return list(reader)


def write_samples_csv(samples: SampleSet, fh) -> None:
    """Labelled part as ``feature,label`` if present, else target part as ``feature``."""
    w = csv.writer(fh, lineterminator="\n")
    if samples.m:
        w.writerow(["feature", "label"])
        for x, y in zip(samples.labeled_x, samples.labeled_y):
            w.writerow([samples.features[x], int(y)])
    else:
        w.writerow(["feature"])
        for x in samples.target_x:
            w.writerow([samples.features[x]])


# ---------------------------------------------------------------------------
# estimator registry


@dataclass(frozen=True)
class EstimatorSpec:
    name: str
    options: dict = field(default_factory=dict)

    @classmethod
    def parse(cls, obj) -> EstimatorSpec:
        if isinstance(obj, EstimatorSpec):
            return obj
        if isinstance(obj, str):
            spec = cls(obj)
        else:
            obj = dict(obj)
            spec = cls(obj.pop("name"), obj)
        if spec.name not in ESTIMATORS:
            raise ValidationError(f"unknown estimator {spec.name!r}; choose from {sorted(ESTIMATORS)}")
        return spec


@dataclass
class _Context:
    source: JointDistribution
    target_features: CategoricalDistribution
    transform: FeatureTransform
    classifier: Classifier
    cfg: SolverConfig
    samples: SampleSet | None = None


def _run_cc(ctx, opts):
    return est.classify_and_count(ctx.classifier, ctx.target_features, ctx.source.n_classes)


def _run_pcc(ctx, opts):
    return est.pcc(posteriors(ctx.source), ctx.target_features)


def _run_reweighting(ctx, opts):
    w = feature_weights_from(ctx.source, ctx.target_features)
    if ctx.samples is not None and ctx.samples.m:
        return est.reweighting_emp(ctx.samples, w)
    return est.reweighting(ctx.source, w)


def _run_em(ctx, opts):
    _, py = marginals(ctx.source)
    return est.em_label_shift(posteriors(ctx.source), py, ctx.target_features, ctx.cfg)


def _run_ccm(ctx, opts):
    cfg = ctx.cfg.with_(projection_tol=opts.get("projection_tol", ctx.cfg.projection_tol))
    return est.ccm_estimate(ctx.source, ctx.target_features, ctx.transform, ctx.classifier, cfg)


def _run_fjs_q(ctx, opts):
    rho = opts.get("rho", [1.0] * (ctx.source.n_classes - 1))
    return est.fjs_solve_q(ctx.source, ctx.target_features, rho, ctx.cfg)


ESTIMATORS: dict[str, Callable[[_Context, dict], PriorEstimate]] = {
    "cc": _run_cc,
    "pcc": _run_pcc,
    "reweighting": _run_reweighting,
    "em": _run_em,
    "ccm": _run_ccm,
    "fjs_q": _run_fjs_q,
}


def run_estimator(
    name: str,
    source: JointDistribution,
    target_features: CategoricalDistribution,
    *,
    transform: FeatureTransform | None = None,
    classifier: Classifier | None = None,
    cfg: SolverConfig | None = None,
    samples: SampleSet | None = None,
    options: Mapping | None = None,
) -> PriorEstimate:
    """Run one registered estimator by name; errors propagate.

    ``transform`` defaults to a single stratum and ``classifier`` to the
    Bayes classifier of ``source``.
    """
    spec = EstimatorSpec.parse({"name": name, **(options or {})})
    ctx = _Context(
        source,
        target_features,
        transform or FeatureTransform.constant(source.features),
        classifier or Classifier.bayes(source),
        cfg or SolverConfig(),
        samples,
    )
    return ESTIMATORS[spec.name](ctx, spec.options)

DIAGNOSTICS = ("verify", "rank", "cdi", "sufficiency", "decomposition")


# ---------------------------------------------------------------------------
# scenarios


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    """One experiment: a source, a shift (or target data), estimators and sampling.

    Either ``source`` is given (optionally with ``shift``), or ``labeled_path``
    and ``unlabeled_path`` point at CSV files. ``sample_sizes = (m, n)``
    switches on the empirical mode and then requires ``seed``.
    """

    estimators: tuple
    source: JointDistribution | None = None
    shift: ShiftSpec | None = None
    labeled_path: str | None = None
    unlabeled_path: str | None = None
    features: tuple | None = None
    sample_sizes: tuple | None = None
    seed: int | None = None
    smoothing: float | None = None
    transform: FeatureTransform | None = None
    classifier: Classifier | None = None
    diagnostics: tuple = ()
    solver: SolverConfig = field(default_factory=SolverConfig)
    name: str = "scenario"
    output_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "estimators", tuple(EstimatorSpec.parse(e) for e in self.estimators))
        if not self.estimators:
            raise ValidationError("a scenario needs at least one estimator")
        bad = [d for d in self.diagnostics if d not in DIAGNOSTICS]
        if bad:
            raise ValidationError(f"unknown diagnostics {bad}; choose from {list(DIAGNOSTICS)}")
        object.__setattr__(self, "diagnostics", tuple(self.diagnostics))
        from_files = self.labeled_path is not None or self.unlabeled_path is not None
        if from_files:
            if self.labeled_path is None or self.unlabeled_path is None:
                raise ValidationError("data ingestion needs both a labelled and an unlabelled CSV")
            if self.source is not None or self.shift is not None:
                raise ValidationError("give either CSV paths or a source distribution, not both")
        elif self.source is None:
            raise ValidationError("a scenario needs a source distribution or CSV paths")
        if self.sample_sizes is not None:
            m, n = self.sample_sizes
            if m < 0 or n < 0:
                raise ValidationError("sample sizes must be non-negative")
            object.__setattr__(self, "sample_sizes", (int(m), int(n)))
            if self.seed is None:
                raise ValidationError("a seed is required whenever sample sizes are given")

    @property
    def from_files(self) -> bool:
        return self.labeled_path is not None

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> ScenarioConfig:
        base = Path(base_dir) if base_dir is not None else Path(".")
        src = d.get("source")
        source = labeled = unlabeled = features = None
        if isinstance(src, Mapping) and "mass" in src:
            source = JointDistribution.from_dict(src)
        elif isinstance(src, Mapping):
            labeled = str(base / src["labeled"])
            unlabeled = str(base / src["unlabeled"])
            features = tuple(src["features"]) if src.get("features") is not None else None
        elif isinstance(src, str):
            with open(base / src, encoding="utf-8") as fh:
                source = JointDistribution.from_dict(json.load(fh))
        solver = SolverConfig(
            tol=d.get("tol", SolverConfig.tol),
            max_iter=d.get("max_iter", SolverConfig.max_iter),
        )
        return cls(
            estimators=tuple(d.get("estimators", ())),
            source=source,
            shift=ShiftSpec.from_dict(d["shift"]) if d.get("shift") else None,
            labeled_path=labeled,
            unlabeled_path=unlabeled,
            features=features,
            sample_sizes=tuple(d["sample_sizes"]) if d.get("sample_sizes") else None,
            seed=d.get("seed"),
            smoothing=d.get("smoothing"),
            transform=FeatureTransform.from_dict(d["transform"]) if d.get("transform") else None,
            classifier=Classifier.from_dict(d["classifier"]) if d.get("classifier") else None,
            diagnostics=tuple(d.get("diagnostics", ())),
            solver=solver,
            name=d.get("name", "scenario"),
            output_path=d.get("output"),
        )


@dataclass
class EstimatorResult:
    priors: list | None
    true_priors: list | None
    max_abs_error: float | None
    runtime: float
    error: str | None = None
    message: str | None = None
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self, timings: bool = False) -> dict:
        d = {
            "priors": self.priors,
            "true_priors": self.true_priors,
            "max_abs_error": self.max_abs_error,
        }
        if self.error is not None:
            d["error"] = self.error
            d["message"] = self.message
        d["diagnostics"] = est._jsonable(self.diagnostics)
        if timings:
            d["runtime"] = self.runtime
        return d


@dataclass
class ExperimentReport:
    """Results per mode (``exact`` / ``empirical``) and estimator, plus diagnostics.

    Runtimes are kept on the objects but left out of the serialised form
    unless ``timings=True``, so reports of identical configurations are
    byte-identical.
    """

    name: str
    per_estimator: dict
    true_priors: list | None = None
    diagnostics: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)
    error: str | None = None
    message: str | None = None

    @property
    def failed(self) -> bool:
        return self.error is not None

    def to_dict(self, timings: bool = False) -> dict:
        d = {
            "name": self.name,
            "prng": PRNG_NAME,
            "true_priors": self.true_priors,
            "per_estimator": {
                mode: {k: r.to_dict(timings) for k, r in results.items()}
                for mode, results in self.per_estimator.items()
            },
            "diagnostics": est._jsonable(self.diagnostics),
            "notes": list(self.notes),
        }
        if self.error is not None:
            d["error"] = self.error
            d["message"] = self.message
        return d

    def to_json(self, timings: bool = False) -> str:
        return json.dumps(self.to_dict(timings), indent=2)

    def to_markdown(self) -> str:
        lines = [f"## {self.name}", ""]
        if self.error:
            lines.append(f"**failed**: {self.error}: {self.message}")
            return "\n".join(lines)
        if self.true_priors is not None:
            lines.append("true priors: " + ", ".join(f"{v:.6f}" for v in self.true_priors))
            lines.append("")
        lines.append("| mode | estimator | priors | max abs error | status |")
        lines.append("|---|---|---|---|---|")
        for mode, results in self.per_estimator.items():
            for name, r in results.items():
                pri = ", ".join(f"{v:.6f}" for v in r.priors) if r.priors else ""
                err = f"{r.max_abs_error:.3g}" if r.max_abs_error is not None else ""
                lines.append(f"| {mode} | {name} | {pri} | {err} | {r.error or 'ok'} |")
        for note in self.notes:
            lines.append(f"\n_{note}_")
        return "\n".join(lines)


def _run_estimators(cfg: ScenarioConfig, ctx: _Context, truth) -> dict:
    out = {}
    for spec in cfg.estimators:
        start = time.perf_counter()
        try:
            res = ESTIMATORS[spec.name](ctx, spec.options)
        except PriorShiftError as exc:
            log.info("%s/%s failed: %s", cfg.name, spec.name, exc)
            out[spec.name] = EstimatorResult(
                None, truth, None, time.perf_counter() - start, type(exc).__name__, str(exc)
            )
            continue
        pri = res.priors.mass
        err = float(np.abs(pri - np.asarray(truth)).max()) if truth is not None else None
        out[spec.name] = EstimatorResult(
            pri.tolist(), truth, err, time.perf_counter() - start, diagnostics=res.diagnostics
        )
    return out


def _diagnostics(cfg: ScenarioConfig, P, Q, transform, classifier) -> dict:
    out = {}
    for name in cfg.diagnostics:
        try:
            if name == "rank":
                out[name] = diag.rank_identifiability(P, transform, classifier=classifier).to_dict()
            elif name == "sufficiency":
                out[name] = diag.sufficiency_check(P, transform).to_dict()
            elif Q is None:
                out[name] = {"skipped": "target joint unknown"}
            elif name == "verify":
                spec = cfg.shift
                out[name] = verify_shift(P, Q, spec).to_dict() if spec else {"skipped": "no shift"}
            elif name == "cdi":
                out[name] = diag.cdi_check(P, Q, transform).to_dict()
            elif name == "decomposition":
                out[name] = diag.scs_decomposition_check(P, Q, transform, classifier).to_dict()
        except PriorShiftError as exc:
            out[name] = {"error": type(exc).__name__, "message": str(exc)}
    return out


def run_experiment(cfg: ScenarioConfig, index: int = 0) -> ExperimentReport:
    """Execute one scenario; estimator failures are recorded, not raised."""
    try:
        return _run_experiment(cfg, index)
    except PriorShiftError as exc:
        log.warning("scenario %s failed: %s", cfg.name, exc)
        return ExperimentReport(cfg.name, {}, error=type(exc).__name__, message=str(exc))


def _run_experiment(cfg: ScenarioConfig, index: int) -> ExperimentReport:
    notes = []
    per_mode = {}
    truth = None
    diagnostics = {}
    empirical_smoothing = DEFAULT_EMPIRICAL_SMOOTHING if cfg.smoothing is None else cfg.smoothing
    empirical_cfg = cfg.solver.with_(projection_tol=EMPIRICAL_PROJECTION_TOL)

    if cfg.from_files:
        records, features, inferred_l = read_labeled_csv(cfg.labeled_path, cfg.features)
        ids, features_u, inferred_u = read_unlabeled_csv(cfg.unlabeled_path, cfg.features)
        if cfg.features is None:
            features = tuple(dict.fromkeys(features + features_u))
            notes.append("feature space inferred from the data files")
        n_classes = max(2, max((y for _, y in records), default=1) + 1)
        samples = SampleSet.from_records(features, n_classes, records, ids)
        P_hat, qx_hat = fit_empirical(samples, empirical_smoothing)
        if P_hat is None or qx_hat is None:
            raise EmptySample("both CSV files must contain at least one row")
        T = cfg.transform or FeatureTransform.constant(features)
        C = cfg.classifier or Classifier.bayes(P_hat)
        ctx = _Context(P_hat, qx_hat, T, C, empirical_cfg, samples)
        per_mode["empirical"] = _run_estimators(cfg, ctx, None)
        diagnostics = _diagnostics(cfg, P_hat, None, T, C)
        return ExperimentReport(cfg.name, per_mode, None, diagnostics, notes)

    P = cfg.source
    Q = synthesize(P, cfg.shift, cfg.solver) if cfg.shift is not None else P
    qx, qy = marginals(Q)
    truth = qy.mass.tolist() if cfg.shift is not None else None
    T = cfg.transform or FeatureTransform.constant(P.features)
    C = cfg.classifier or Classifier.bayes(P)
    per_mode["exact"] = _run_estimators(cfg, _Context(P, qx, T, C, cfg.solver), truth)
    diagnostics = _diagnostics(cfg, P, Q, T, C)

    if cfg.sample_sizes is not None:
        m, n = cfg.sample_sizes
        labeled = draw_samples(P, m, cfg.seed, (index, 0))
        unlabeled = draw_samples(qx, n, cfg.seed, (index, 1))
        samples = labeled.merge(unlabeled)
        P_hat, qx_hat = fit_empirical(samples, empirical_smoothing)
        if P_hat is None or qx_hat is None:
            raise EmptySample("empirical mode needs m > 0 and n > 0")
        C_hat = cfg.classifier or Classifier.bayes(P_hat)
        ctx = _Context(P_hat, qx_hat, T, C_hat, empirical_cfg, samples)
        per_mode["empirical"] = _run_estimators(cfg, ctx, truth)
    return ExperimentReport(cfg.name, per_mode, truth, diagnostics, notes)


def run_batch(configs: Sequence[ScenarioConfig], max_workers: int | None = None) -> list[ExperimentReport]:
    """Run scenarios independently; scenario ``i`` draws from stream index ``i``.

    Results come back in configuration order whether or not they ran in
    parallel. A failing scenario only affects its own report.
    """
    jobs = list(enumerate(configs))
    if max_workers and max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            results = dict(zip(range(len(jobs)), pool.map(lambda j: run_experiment(j[1], j[0]), jobs)))
    else:
        results = {i: run_experiment(c, i) for i, c in jobs}
    return [results[i] for i in range(len(jobs))]


def load_scenarios(path) -> list[ScenarioConfig]:
    """A JSON file with one scenario object or ``{"scenarios": [...]}``."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    items = d["scenarios"] if isinstance(d, Mapping) and "scenarios" in d else [d]
    shared_seed = d.get("seed") if isinstance(d, Mapping) else None
    out = []
    for item in items:
        if shared_seed is not None and "seed" not in item:
            item = {**item, "seed": shared_seed}
        out.append(ScenarioConfig.from_dict(item, path.parent))
    return out
