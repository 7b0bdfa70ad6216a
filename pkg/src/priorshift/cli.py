"""Command line entry point: ``priorshift {synth,estimate,diagnose,run,sample}``.

Exit status is 0 on success, 2 for invalid input, 3 when a solver fails to
converge and 4 when a quantity is not identifiable.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import diagnostics as diag
from . import errors
from .core import CategoricalDistribution, Classifier, FeatureTransform, JointDistribution, marginals
from .errors import PriorShiftError, ValidationError
from .estimators import SampleSet, _jsonable
from .harness import (
    DEFAULT_EMPIRICAL_SMOOTHING,
    ESTIMATORS,
    draw_samples,
    fit_empirical,
    load_scenarios,
    read_labeled_csv,
    read_unlabeled_csv,
    run_batch,
    run_estimator,
    write_samples_csv,
)
from .solvers import EMPIRICAL_PROJECTION_TOL, SolverConfig
from .synthesis import ShiftKind, ShiftSpec, synthesize, verify_shift

log = logging.getLogger(__name__)


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _joint(path) -> JointDistribution:
    return JointDistribution.from_dict(_read_json(path))


def _feature_pmf(path, source: JointDistribution) -> CategoricalDistribution:
    d = _read_json(path)
    if "mass" in d and "features" in d and "classes" in d:
        return marginals(JointDistribution.from_dict(d))[0]
    if "labels" in d:
        return CategoricalDistribution.from_dict(d)
    return CategoricalDistribution(tuple(d), list(d.values()))


def _solver(args, base: SolverConfig | None = None) -> SolverConfig:
    base = base or SolverConfig()
    changes = {k: v for k, v in (("tol", args.tol), ("max_iter", args.max_iter)) if v is not None}
    return base.with_(**changes)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _fmt(v) -> str:
    return ", ".join(f"{x:.10g}" for x in v)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    source = _joint(args.source)
    spec = ShiftSpec.from_dict(_read_json(args.shift))
    target = synthesize(source, spec, _solver(args))
    _emit(target.to_json(indent=2), args.out)
    return 0


def cmd_estimate(args) -> int:
    cfg = _solver(args)
    samples = None
    if args.labeled or args.unlabeled:
        if not (args.labeled and args.unlabeled):
            raise ValidationError("--labeled and --unlabeled must be given together")
        declared = None
        if args.features:
            declared = tuple(_read_json(args.features))
        records, feats, _ = read_labeled_csv(args.labeled, declared)
        ids, feats_u, inferred = read_unlabeled_csv(args.unlabeled, declared)
        if inferred:
            feats = tuple(dict.fromkeys(feats + feats_u))
            log.warning("feature space inferred from the data files")
        n_classes = max(2, max((y for _, y in records), default=1) + 1)
        samples = SampleSet.from_records(feats, n_classes, records, ids)
        smoothing = DEFAULT_EMPIRICAL_SMOOTHING if args.smoothing is None else args.smoothing
        source, qx = fit_empirical(samples, smoothing)
        if source is None or qx is None:
            raise ValidationError("both CSV files need at least one data row")
        cfg = cfg.with_(projection_tol=EMPIRICAL_PROJECTION_TOL)
    else:
        if not (args.source and args.target):
            raise ValidationError("give --source and --target, or --labeled and --unlabeled")
        source = _joint(args.source)
        qx = _feature_pmf(args.target, source)
    transform = FeatureTransform.from_dict(_read_json(args.transform)) if args.transform else None
    classifier = Classifier.from_dict(_read_json(args.classifier)) if args.classifier else None
    options = {"rho": args.rho} if args.rho else {}

    results, failure = {}, None
    for name in args.method:
        try:
            res = run_estimator(
                name, source, qx, transform=transform, classifier=classifier,
                cfg=cfg, samples=samples, options=options if name == "fjs_q" else None,
            )
        except PriorShiftError as exc:
            failure = failure or exc
            print(f"{name}: {type(exc).__name__}: {exc}", file=sys.stderr)
            continue
        results[name] = res
    if args.format == "md":
        lines = ["| estimator | priors |", "|---|---|"]
        lines += [f"| {k} | {_fmt(r.priors.mass)} |" for k, r in results.items()]
        text = "\n".join(lines)
    else:
        text = json.dumps({k: r.to_dict() for k, r in results.items()}, indent=2)
    _emit(text, args.out)
    return failure.exit_code if failure else 0


def cmd_diagnose(args) -> int:
    source = _joint(args.source)
    target = _joint(args.target)
    transform = (
        FeatureTransform.from_dict(_read_json(args.transform))
        if args.transform
        else FeatureTransform.constant(source.features)
    )
    classifier = Classifier.from_dict(_read_json(args.classifier)) if args.classifier else Classifier.bayes(source)
    kinds = [ShiftKind.parse(k) for k in args.kind] if args.kind else list(ShiftKind)
    verdicts = {
        k.value: verify_shift(source, target, ShiftSpec(k, transform=transform), _solver(args).tol) for k in kinds
    }
    rank = diag.rank_identifiability(source, transform, classifier=classifier)
    if args.format == "md":
        lines = ["| shift | holds | max deviation |", "|---|---|---|"]
        lines += [f"| {k} | {v.holds} | {v.max_deviation:.3g} |" for k, v in verdicts.items()]
        lines += ["", f"identifiable: {rank.overall_identifiable}", "",
                  "| stratum | rank | sigma_min | undefined columns |", "|---|---|---|---|"]
        for s, r in rank.per_stratum.items():
            lines.append(f"| {s} | {r.rank} | {r.sigma_min:.3g} | {list(r.undefined_columns)} |")
        text = "\n".join(lines)
    else:
        text = json.dumps(
            _jsonable({"verdicts": {k: v.to_dict() for k, v in verdicts.items()}, "rank": rank.to_dict()}),
            indent=2,
        )
    _emit(text, args.out)
    return 0


def cmd_run(args) -> int:
    configs = load_scenarios(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.smoothing is not None:
        overrides["smoothing"] = args.smoothing
    configs = [replace(c, solver=_solver(args, c.solver), **overrides) for c in configs]
    reports = run_batch(configs, max_workers=args.workers)
    if args.format == "md":
        text = "\n\n".join(r.to_markdown() for r in reports)
    else:
        payload = [r.to_dict(timings=args.timings) for r in reports]
        text = json.dumps(payload[0] if len(payload) == 1 else payload, indent=2)
    for cfg, rep in zip(configs, reports):
        if cfg.output_path:
            Path(cfg.output_path).write_text(rep.to_json(args.timings) + "\n", encoding="utf-8")
    _emit(text, args.out)
    failed = [r for r in reports if r.failed]
    if not failed:
        return 0
    exc_class = getattr(errors, failed[0].error, PriorShiftError)
    return getattr(exc_class, "exit_code", 1)


def cmd_sample(args) -> int:
    if args.seed is None:
        raise ValidationError("sample needs --seed")
    d = _read_json(args.dist)
    dist = JointDistribution.from_dict(d) if "classes" in d else CategoricalDistribution.from_dict(d)
    samples = draw_samples(dist, args.n, args.seed, tuple(args.stream))
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            write_samples_csv(samples, fh)
    else:
        write_samples_csv(samples, sys.stdout)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--tol", type=float, default=None, help="solver / identity tolerance")
    common.add_argument("--max-iter", type=int, default=None)
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--smoothing", type=float, default=None, help="additive smoothing for fitted data")
    common.add_argument("--format", choices=("json", "md"), default="json")
    common.add_argument("--out", default=None, help="write output here instead of stdout")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="priorshift", description="Class prior estimation under dataset shift.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="build a shifted target from a source and a shift spec")
    p.add_argument("--source", required=True, help="source joint distribution JSON")
    p.add_argument("--shift", required=True, help="shift spec JSON")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("estimate", parents=[common], help="estimate target class priors")
    p.add_argument("--source", help="source joint distribution JSON")
    p.add_argument("--target", help="target feature pmf JSON (or a joint, whose feature marginal is used)")
    p.add_argument("--labeled", help="labelled CSV (feature,label)")
    p.add_argument("--unlabeled", help="unlabelled CSV (feature)")
    p.add_argument("--features", help="JSON list declaring the feature space for CSV input")
    p.add_argument("--method", nargs="+", default=["em"], choices=sorted(ESTIMATORS))
    p.add_argument("--transform", help="feature transform JSON")
    p.add_argument("--classifier", help="classifier JSON")
    p.add_argument("--rho", type=float, nargs="+", help="scale constants for fjs_q")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("diagnose", parents=[common], help="shift verdicts and rank report for a pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--transform")
    p.add_argument("--classifier")
    p.add_argument("--kind", nargs="+", choices=[k.value for k in ShiftKind])
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("run", parents=[common], help="execute scenario configurations")
    p.add_argument("config", help="scenario JSON (single object or {\"scenarios\": [...]})")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--timings", action="store_true", help="include runtimes in the JSON report")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sample", parents=[common], help="draw a seeded sample as CSV")
    p.add_argument("--dist", required=True, help="joint distribution or feature pmf JSON")
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--stream", type=int, nargs="*", default=[], help="stream index path")
    p.set_defaults(func=cmd_sample)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PriorShiftError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
