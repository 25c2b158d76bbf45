"""Command-line interface.

Subcommands mirror the pipeline stages: ``ingest``, ``build-tensor``,
``factorize``, ``evaluate``, ``run`` (the full grid), ``simulate``, and
``report``. Exit codes: 0 success, 1 input error, 2 numerical failure,
3 degenerate evaluation (e.g. a single-class fold).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .cohort import (
    assign_outcomes,
    filter_by_prevalence,
    load_code_set,
    load_cohort,
    load_tables,
    normalize_medication_names,
    save_cohort,
)
from .cp import export_phenotypes, phenotype_report_dict, phenotype_report_text, save_model
from .errors import InputError, PhenotensorError
from .logit import repeated_cv
from .pipeline import (
    ExperimentConfig,
    EvalReport,
    _ConditionEvaluator,
    PreparedExperiment,
    _selected_names,
    _term_names,
    child_seed,
    report_tensor_stats,
    run_experiment,
)
from .simulate import SyntheticSpec, simulate_cohort
from .solver import SolverConfig, Supervision, factorize
from .tensor import (
    EQUAL_CORRESPONDENCE,
    INDICATION_FILTERED,
    IndicationMap,
    TensorStats,
    count_cooccurrences,
    drop_empty_patients,
    load_tensor,
    save_tensor,
    tensor_stats,
    truncate_counts,
)

log = logging.getLogger(__name__)


def _add_ingest(subparsers):
    p = subparsers.add_parser("ingest", help="load raw files into a cohort JSON")
    p.add_argument("--encounters", required=True)
    p.add_argument("--demographics", required=True)
    p.add_argument("--income", required=True)
    p.add_argument("--med-map", default=None)
    p.add_argument("--exclusions", default=None)
    p.add_argument("--dx-allowlist", default=None)
    p.add_argument("--forced-medications", default=None)
    p.add_argument("--dx-min-frac", type=float, default=0.01)
    p.add_argument("--med-min-frac", type=float, default=0.005)
    p.add_argument("--horizon-years", type=float, default=5.0)
    p.add_argument("--window-years", type=float, default=1.0)
    p.add_argument("--out", required=True)


def _run_ingest(args) -> int:
    cohort = load_tables(args.encounters, args.demographics, args.income)
    if args.med_map:
        cohort = normalize_medication_names(cohort, args.med_map)
    cohort = assign_outcomes(cohort, args.horizon_years, args.window_years)
    excluded = load_code_set(args.exclusions) if args.exclusions else frozenset()
    if args.dx_allowlist:
        excluded = excluded - load_code_set(args.dx_allowlist)
    forced = load_code_set(args.forced_medications) if args.forced_medications else frozenset()
    cohort = filter_by_prevalence(
        cohort,
        dx_min_frac=args.dx_min_frac,
        med_min_frac=args.med_min_frac,
        forced_medications=forced,
        excluded_codes=excluded,
    )
    save_cohort(cohort, args.out)
    for note in cohort.notes:
        print(note)
    return 0


def _add_build_tensor(subparsers):
    p = subparsers.add_parser("build-tensor", help="build the co-occurrence tensor")
    p.add_argument("--cohort", required=True)
    p.add_argument("--mode", choices=[EQUAL_CORRESPONDENCE, INDICATION_FILTERED],
                   default=EQUAL_CORRESPONDENCE)
    p.add_argument("--indications", default=None)
    p.add_argument("--extra-indications", default=None)
    p.add_argument("--truncate-percentile", type=float, default=0.99)
    p.add_argument("--out-tensor", required=True)
    p.add_argument("--out-stats", default=None)
    p.add_argument("--out-cohort", default=None,
                   help="where to write the cohort after empty patients are dropped")


def _run_build_tensor(args) -> int:
    cohort = load_cohort(args.cohort)
    indications = None
    if args.indications:
        indications = IndicationMap.from_files(args.indications, args.extra_indications)
    elif args.mode == INDICATION_FILTERED:
        raise InputError("--mode indicated requires --indications")
    tensor = count_cooccurrences(cohort, mode=args.mode, indications=indications)
    if tensor.nnz == 0:
        raise InputError("the co-occurrence tensor is empty")
    tensor = truncate_counts(tensor, args.truncate_percentile)
    tensor, cohort = drop_empty_patients(tensor, cohort)
    save_tensor(tensor, args.out_tensor)
    stats = tensor_stats(tensor, cohort)
    if args.out_stats:
        with open(args.out_stats, "w", encoding="utf-8") as fh:
            json.dump(stats.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
    if args.out_cohort:
        save_cohort(cohort, args.out_cohort)
    print(
        f"tensor: {tensor.dims[0]} patients x {tensor.dims[1]} diagnoses x "
        f"{tensor.dims[2]} medications, {tensor.nnz} nonzeros"
    )
    return 0


def _add_factorize(subparsers):
    p = subparsers.add_parser("factorize", help="fit a CP model to a tensor file")
    p.add_argument("--tensor", required=True)
    p.add_argument("--cohort", default=None, help="cohort JSON (labels/covariates for omega > 0)")
    p.add_argument("--solver-config", default=None, help="key = value solver config file")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--max-outer-iters", type=int, default=None)
    p.add_argument("--rel-tol", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--use-covariates", action="store_true",
                   help="include cohort covariates in the supervised term")
    p.add_argument("--out-dir", required=True)


def _solver_config_from_args(args) -> SolverConfig:
    config = SolverConfig.from_file(args.solver_config) if args.solver_config else SolverConfig()
    overrides = {}
    for key in ("rank", "omega", "max_outer_iters", "rel_tol", "seed"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    config.validate()
    return config


def _run_factorize(args) -> int:
    tensor = load_tensor(args.tensor)
    config = _solver_config_from_args(args)
    sup = None
    if config.omega > 0:
        if not args.cohort:
            raise InputError("--omega > 0 requires --cohort for labels")
        cohort = load_cohort(args.cohort)
        patients = tensor.labels[0]
        missing = [p for p in patients if p not in cohort.labels]
        if missing:
            raise InputError(f"cohort lacks labels for {len(missing)} tensor patients")
        labels = {i: int(cohort.labels[p]) for i, p in enumerate(patients)}
        covariates = None
        if args.use_covariates:
            covariates = np.array([cohort.covariates[p].as_tuple() for p in patients], dtype=float)
        sup = Supervision(labels=labels, covariates=covariates)
    model, trace = factorize(tensor, config, sup)

    os.makedirs(args.out_dir, exist_ok=True)
    save_model(model, os.path.join(args.out_dir, "model.json"))
    trace.save_csv(os.path.join(args.out_dir, "trace.csv"))
    phenotypes, lengths = export_phenotypes(model)
    with open(os.path.join(args.out_dir, "phenotypes.txt"), "w", encoding="utf-8") as fh:
        fh.write(phenotype_report_text(phenotypes, lengths, header_notes=(f"omega: {config.omega:g}",)))
    with open(os.path.join(args.out_dir, "phenotypes.json"), "w", encoding="utf-8") as fh:
        json.dump(phenotype_report_dict(phenotypes, lengths), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(
        f"factorized: rank {config.rank}, {trace.n_iterations()} iteration(s), "
        f"converged={trace.converged}, final objective "
        f"{trace.objective[-1] if trace.objective else float('nan'):g}"
    )
    return 0


def _add_evaluate(subparsers):
    p = subparsers.add_parser("evaluate", help="repeated-CV AUC for one condition")
    p.add_argument("--tensor", required=True)
    p.add_argument("--cohort", required=True)
    p.add_argument("--features", choices=["covariates", "phenotypes", "phenotypes_covariates"],
                   required=True)
    p.add_argument("--omega", type=float, default=0.0)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--max-outer-iters", type=int, default=None)
    p.add_argument("--rel-tol", type=float, default=None)
    p.add_argument("--cv-k", type=int, default=10)
    p.add_argument("--cv-reps", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)


def _run_evaluate(args) -> int:
    tensor = load_tensor(args.tensor)
    cohort = load_cohort(args.cohort)
    patients = tensor.labels[0]
    missing = [p for p in patients if p not in cohort.labels]
    if missing:
        raise InputError(f"cohort lacks labels for {len(missing)} tensor patients")

    config = ExperimentConfig(
        encounters="", demographics="", income="",
        out_dir=os.path.dirname(os.path.abspath(args.out)) or ".",
        seed=args.seed,
        use_covariates=args.features != "phenotypes",
        omega_grid=(args.omega,) if args.omega > 0 else (0.0,),
        rank=args.rank if args.rank is not None else SolverConfig().rank,
        max_outer_iters=args.max_outer_iters if args.max_outer_iters is not None else 500,
        rel_tol=args.rel_tol if args.rel_tol is not None else 1e-4,
        cv_k=args.cv_k,
        cv_reps=args.cv_reps,
    )
    prepared = PreparedExperiment(cohort=cohort, tensor=tensor, stats=tensor_stats(tensor, cohort),
                                  indications=None)
    evaluator = _ConditionEvaluator(config, prepared, args.features, args.omega,
                                    child_seed(args.seed, 0, 0))
    cv_report = repeated_cv(
        evaluator.builder(),
        evaluator.y,
        k=args.cv_k,
        reps=args.cv_reps,
        seed=child_seed(args.seed, 0, 1),
    )
    term_names = _term_names(args.features, config.rank)
    report = EvalReport(
        condition=f"{args.features}__{'supervised' if args.omega > 0 else 'unsupervised'}",
        feature_set=args.features,
        supervised=args.omega > 0,
        omega=args.omega,
        cv=cv_report,
        term_names=term_names,
        selected_term_names=_selected_names(cv_report, term_names),
        phenotype_lengths=None,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"mean AUC {cv_report.mean_auc:.4f} CI ({cv_report.ci[0]:.4f}, {cv_report.ci[1]:.4f})")
    return 0


def _add_run(subparsers):
    p = subparsers.add_parser(
        "run",
        help="run the full experiment grid (config file and/or flags)",
    )
    p.add_argument("--config", default=None, help="key = value experiment config file")
    p.add_argument("--seed", type=int, required=True)
    # one flag per configuration key; flags override the config file
    import dataclasses as dc

    from .pipeline import BOOL_KEYS, FLOAT_KEYS, INT_KEYS

    for field in dc.fields(ExperimentConfig):
        if field.name == "seed":
            continue
        flag = "--" + field.name.replace("_", "-")
        if field.name in BOOL_KEYS:
            p.add_argument(flag, default=None, choices=["true", "false"])
        elif field.name in INT_KEYS:
            p.add_argument(flag, type=int, default=None)
        elif field.name in FLOAT_KEYS:
            p.add_argument(flag, type=float, default=None)
        elif field.name == "omega_grid":
            p.add_argument(flag, default=None, help="comma-separated, e.g. 0,0.1,1")
        else:
            p.add_argument(flag, default=None)


def _run_run(args) -> int:
    import dataclasses as dc

    from .pipeline import config_values_from_file, parse_config_value

    values = config_values_from_file(args.config) if args.config else {}
    for field in dc.fields(ExperimentConfig):
        if field.name == "seed":
            continue
        raw = getattr(args, field.name)
        if raw is None:
            continue
        values[field.name] = parse_config_value(field.name, raw) if isinstance(raw, str) else raw
    values["seed"] = args.seed
    config = ExperimentConfig.from_values(values)
    reports = run_experiment(config)
    with open(os.path.join(config.out_dir, "summary.txt"), encoding="utf-8") as fh:
        print(fh.read(), end="")
    return 0 if reports else 1


def _add_simulate(subparsers):
    p = subparsers.add_parser("simulate", help="write a synthetic cohort with known truth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n-patients", type=int, default=2000)
    p.add_argument("--n-dx", type=int, default=30)
    p.add_argument("--n-med", type=int, default=20)
    p.add_argument("--true-rank", type=int, default=6)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--lambda-scale", type=float, default=3.0)
    p.add_argument("--membership-prob", type=float, default=0.35)
    p.add_argument("--label-intercept", type=float, default=-0.6)


def _run_simulate(args) -> int:
    spec = SyntheticSpec(
        n_patients=args.n_patients,
        n_dx=args.n_dx,
        n_med=args.n_med,
        true_rank=args.true_rank,
        noise=args.noise,
        lambda_scale=args.lambda_scale,
        membership_prob=args.membership_prob,
        label_intercept=args.label_intercept,
        seed=args.seed,
    )
    sim = simulate_cohort(spec, args.out_dir)
    print(
        f"simulated {spec.n_patients} patients, {len(sim.values)} nonzero cells, "
        f"{int(sim.labels.sum())} deaths; files in {args.out_dir}"
    )
    return 0


def _add_report(subparsers):
    p = subparsers.add_parser("report", help="side-by-side tensor characteristics table")
    p.add_argument("--stats", action="append", required=True, metavar="LABEL=PATH",
                   help="tensor stats JSON, repeatable (e.g. All=stats_eq.json Ind=stats_ind.json)")
    p.add_argument("--out", default=None, help="write the text table here (printed otherwise)")
    p.add_argument("--out-json", default=None)


def _run_report(args) -> int:
    stats_by_label: dict[str, TensorStats] = {}
    for item in args.stats:
        if "=" not in item:
            raise InputError(f"--stats expects LABEL=PATH, got {item!r}")
        label, _, path = item.partition("=")
        try:
            with open(path, encoding="utf-8") as fh:
                payload = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot open {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise InputError(f"{path}: not valid stats JSON ({exc})") from exc
        try:
            stats_by_label[label.strip()] = TensorStats(**payload)
        except TypeError as exc:
            raise InputError(f"{path}: unexpected stats fields ({exc})") from exc
    text, payload = report_tensor_stats(stats_by_label)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        print(text, end="")
    if args.out_json:
        with open(args.out_json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return 0


_HANDLERS = {
    "ingest": _run_ingest,
    "build-tensor": _run_build_tensor,
    "factorize": _run_factorize,
    "evaluate": _run_evaluate,
    "run": _run_run,
    "simulate": _run_simulate,
    "report": _run_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phenotensor",
        description="supervised CP phenotyping of patient co-occurrence tensors",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    subparsers = parser.add_subparsers(dest="command", required=True)
    _add_ingest(subparsers)
    _add_build_tensor(subparsers)
    _add_factorize(subparsers)
    _add_evaluate(subparsers)
    _add_run(subparsers)
    _add_simulate(subparsers)
    _add_report(subparsers)
    return parser


def run_command(args) -> int:
    return _HANDLERS[args.command](args)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run_command(args)
    except PhenotensorError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
