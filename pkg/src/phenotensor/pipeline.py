"""End-to-end experiment orchestration.

A run covers one correspondence mode and evaluates a grid of conditions
(feature set x supervision): covariates only (no factorization at all),
phenotype memberships only, and memberships plus covariates, each
unsupervised and, when the omega grid has positive entries, supervised
with a tuned omega. Evaluation is repeated stratified cross-validation
with per-fold transductive factorization: the tensor always covers all
patients, but only training-fold labels enter the supervised term.

Everything is driven by one master seed through named substreams, so a
rerun with the same configuration reproduces every output byte.
"""

from __future__ import annotations

import json
import logging
import os
from contextlib import contextmanager
from dataclasses import dataclass, fields

import numpy as np

from . import __version__
from .cohort import (
    COVARIATE_NAMES,
    CohortTable,
    assign_outcomes,
    filter_by_prevalence,
    load_code_set,
    load_tables,
    normalize_medication_names,
    save_cohort,
)
from .cp import (
    CPModel,
    PhenotypeLengthReport,
    export_phenotypes,
    phenotype_report_dict,
    phenotype_report_text,
    save_model,
)
from .errors import InputError, PhenotensorError
from .logit import CvReport, repeated_cv
from .solver import DEFAULT_RANK, FitTrace, SolverConfig, Supervision, factorize
from .tensor import (
    EQUAL_CORRESPONDENCE,
    INDICATION_FILTERED,
    IndicationMap,
    SparseTensor3,
    TensorStats,
    count_cooccurrences,
    drop_empty_patients,
    save_tensor,
    tensor_stats,
    truncate_counts,
)

log = logging.getLogger(__name__)

CONVENTION_NOTES = (
    "1 year = 365 days for window and horizon arithmetic",
    "prevalence thresholds are inclusive and computed on the window-restricted, name-normalized table",
    "count truncation uses the nearest-rank percentile of the nonzero counts, after any indication filtering",
    "memberships are max-normalized per column (l-infinity), so values lie in [0, 1]",
    "reconstruction loss is squared error over the full tensor, zeros included",
    "solver: block projected gradient with backtracking and per-iteration importance recalibration",
    "supervision is transductive: all patients are factorized, only training-fold labels enter the logistic term",
    "stepwise selection uses likelihood-ratio tests with strict entry/exit comparisons",
    "cross-validation is stratified by outcome; bootstrap CI resamples fold AUCs (percentile, nearest-rank)",
    "omega tuning runs on a dedicated random substream, never on the evaluation folds",
)


def child_seed(master: int, *key: int) -> int:
    """Deterministic, schedule-independent substream seed."""
    ss = np.random.SeedSequence([int(master), *[int(k) for k in key]])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ExperimentConfig:
    """Inputs, grid, and protocol knobs of one experiment run."""

    encounters: str
    demographics: str
    income: str
    out_dir: str
    seed: int
    mode: str = EQUAL_CORRESPONDENCE
    use_covariates: bool = True
    omega_grid: tuple[float, ...] = (0.0, 0.01, 0.1, 1.0, 10.0)
    med_map: str | None = None
    indications: str | None = None
    extra_indications: str | None = None
    exclusions: str | None = None
    dx_allowlist: str | None = None
    forced_medications: str | None = None
    rank: int = DEFAULT_RANK
    max_outer_iters: int = 500
    rel_tol: float = 1e-4
    backtrack_shrink: float = 0.5
    backtrack_max: int = 30
    dx_min_frac: float = 0.01
    med_min_frac: float = 0.005
    truncate_percentile: float = 0.99
    horizon_years: float = 5.0
    window_years: float = 1.0
    cv_k: int = 10
    cv_reps: int = 5
    tune_reps: int = 2
    entry: float = 0.05
    exit: float = 0.10
    n_boot: int = 1000
    ci_level: float = 0.95

    def validate(self) -> None:
        if self.mode not in (EQUAL_CORRESPONDENCE, INDICATION_FILTERED):
            raise InputError(f"mode must be '{EQUAL_CORRESPONDENCE}' or '{INDICATION_FILTERED}'")
        if self.mode == INDICATION_FILTERED and not self.indications:
            raise InputError("indication-filtered mode requires an indications file")
        if not self.omega_grid:
            raise InputError("omega grid is empty")
        if any(w < 0 for w in self.omega_grid):
            raise InputError("omega grid values must be >= 0")
        if self.seed is None or self.seed < 0:
            raise InputError("a non-negative master seed is required")
        if self.cv_k < 2 or self.cv_reps < 1 or self.tune_reps < 1:
            raise InputError("need cv_k >= 2, cv_reps >= 1, tune_reps >= 1")
        self.solver_config().validate()

    def solver_config(self, omega: float = 0.0, seed: int = 0) -> SolverConfig:
        return SolverConfig(
            rank=self.rank,
            omega=omega,
            max_outer_iters=self.max_outer_iters,
            rel_tol=self.rel_tol,
            seed=seed,
            backtrack_shrink=self.backtrack_shrink,
            backtrack_max=self.backtrack_max,
        )

    @classmethod
    def from_values(cls, values: dict) -> "ExperimentConfig":
        """Build and validate a config from a key/value dict."""
        if values.get("seed") is None:
            raise InputError("a master seed is required (config key 'seed' or --seed)")
        for required in ("encounters", "demographics", "income", "out_dir"):
            if not values.get(required):
                raise InputError(f"config is missing required key {required!r}")
        config = cls(**values)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path, seed: int | None = None, out_dir: str | None = None) -> "ExperimentConfig":
        """Parse a plain-text ``key = value`` configuration file.

        Relative paths are resolved against the file's directory. A ``seed``
        (or ``out_dir``) argument overrides the file.
        """
        values = config_values_from_file(path)
        if seed is not None:
            values["seed"] = int(seed)
        if out_dir is not None:
            values["out_dir"] = out_dir
        return cls.from_values(values)


PATH_KEYS = {
    "encounters", "demographics", "income", "out_dir", "med_map",
    "indications", "extra_indications", "exclusions", "dx_allowlist",
    "forced_medications",
}
INT_KEYS = {"seed", "rank", "max_outer_iters", "backtrack_max", "cv_k", "cv_reps", "tune_reps", "n_boot"}
FLOAT_KEYS = {
    "rel_tol", "backtrack_shrink", "dx_min_frac", "med_min_frac", "truncate_percentile",
    "horizon_years", "window_years", "entry", "exit", "ci_level",
}
BOOL_KEYS = {"use_covariates"}


def config_values_from_file(path) -> dict:
    """Read a ``key = value`` experiment config into a typed dict."""
    base = os.path.dirname(os.path.abspath(path))
    known = {f.name for f in fields(ExperimentConfig)}
    values: dict = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    with fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise InputError(f"{path} line {line_no}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in known:
                raise InputError(f"{path} line {line_no}: unknown key {key!r}")
            try:
                values[key] = parse_config_value(key, value, base)
            except ValueError as exc:
                raise InputError(f"{path} line {line_no}: {exc}") from exc
    return values


def parse_config_value(key: str, value: str, base: str = ""):
    """Parse one config value; relative paths resolve against ``base``."""
    if key in PATH_KEYS:
        if not base or os.path.isabs(value):
            return value
        return os.path.join(base, value)
    if key in INT_KEYS:
        return int(value)
    if key in FLOAT_KEYS:
        return float(value)
    if key in BOOL_KEYS:
        lowered = value.casefold()
        if lowered in ("true", "yes", "1"):
            return True
        if lowered in ("false", "no", "0"):
            return False
        raise ValueError(f"cannot parse boolean {value!r}")
    if key == "omega_grid":
        return tuple(float(x) for x in value.split(",") if x.strip())
    if key == "mode":
        return value
    raise ValueError(f"unsupported key {key!r}")


@contextmanager
def _stage(name: str):
    try:
        yield
    except PhenotensorError as exc:
        raise type(exc)(f"[stage {name}] {exc}") from exc


@dataclass
class PreparedExperiment:
    cohort: CohortTable
    tensor: SparseTensor3
    stats: TensorStats
    indications: IndicationMap | None


def prepare_experiment(config: ExperimentConfig) -> PreparedExperiment:
    """Ingest the cohort and build the truncated, pruned tensor."""
    with _stage("ingest"):
        cohort = load_tables(config.encounters, config.demographics, config.income)
        if config.med_map:
            cohort = normalize_medication_names(cohort, config.med_map)
        cohort = assign_outcomes(cohort, config.horizon_years, config.window_years)
        excluded = load_code_set(config.exclusions) if config.exclusions else frozenset()
        if config.dx_allowlist:
            excluded = excluded - load_code_set(config.dx_allowlist)
        forced = load_code_set(config.forced_medications) if config.forced_medications else frozenset()
        cohort = filter_by_prevalence(
            cohort,
            dx_min_frac=config.dx_min_frac,
            med_min_frac=config.med_min_frac,
            forced_medications=forced,
            excluded_codes=excluded,
        )
    with _stage("tensor"):
        indications = None
        if config.indications:
            indications = IndicationMap.from_files(config.indications, config.extra_indications)
        tensor = count_cooccurrences(cohort, mode=config.mode, indications=indications)
        if tensor.nnz == 0:
            raise InputError("the co-occurrence tensor is empty")
        tensor = truncate_counts(tensor, config.truncate_percentile)
        tensor, cohort = drop_empty_patients(tensor, cohort)
        stats = tensor_stats(tensor, cohort)
    return PreparedExperiment(cohort=cohort, tensor=tensor, stats=stats, indications=indications)


@dataclass
class EvalReport:
    """Per-condition evaluation: fold AUCs, CI, terms, phenotype lengths."""

    condition: str
    feature_set: str
    supervised: bool
    omega: float
    cv: CvReport
    term_names: tuple[str, ...]
    selected_term_names: tuple[tuple[str, ...], ...]
    phenotype_lengths: PhenotypeLengthReport | None

    def to_dict(self) -> dict:
        return {
            "condition": self.condition,
            "feature_set": self.feature_set,
            "supervised": self.supervised,
            "omega": self.omega,
            "cv": self.cv.to_dict(),
            "term_names": list(self.term_names),
            "selected_term_names": [list(t) for t in self.selected_term_names],
            "phenotype_lengths": None
            if self.phenotype_lengths is None
            else self.phenotype_lengths.to_dict(),
        }


def _covariate_matrix(cohort: CohortTable, patients) -> np.ndarray:
    return np.array([cohort.covariates[p].as_tuple() for p in patients], dtype=float)


def _term_names(feature_set: str, rank: int) -> tuple[str, ...]:
    names: list[str] = []
    if feature_set != "covariates":
        names.extend(f"phenotype_{r + 1}" for r in range(rank))
    if feature_set != "phenotypes":
        names.extend(COVARIATE_NAMES)
    return tuple(names)


def _condition_list(config: ExperimentConfig) -> list[tuple[str, str, bool]]:
    has_positive = any(w > 0 for w in config.omega_grid)
    conditions: list[tuple[str, str, bool]] = []
    if config.use_covariates:
        conditions.append(("covariates_only", "covariates", False))
    feature_sets = ["phenotypes"] + (["phenotypes_covariates"] if config.use_covariates else [])
    for feature_set in feature_sets:
        conditions.append((f"{feature_set}__unsupervised", feature_set, False))
        if has_positive:
            conditions.append((f"{feature_set}__supervised", feature_set, True))
    return conditions


class _ConditionEvaluator:
    """Builds fold design matrices for one condition of the grid."""

    def __init__(self, config, prepared, feature_set, omega, solver_seed):
        self.config = config
        self.tensor = prepared.tensor
        self.cohort = prepared.cohort
        self.feature_set = feature_set
        self.omega = float(omega)
        self.solver_seed = solver_seed
        self.patients = list(prepared.tensor.labels[0])
        self.y = np.array([prepared.cohort.labels[p] for p in self.patients], dtype=int)
        self.cov = (
            _covariate_matrix(prepared.cohort, self.patients)
            if feature_set != "phenotypes"
            else None
        )
        self._shared: tuple[CPModel, FitTrace] | None = None

    def _with_covariates(self, memberships: np.ndarray | None) -> np.ndarray:
        parts = []
        if memberships is not None:
            parts.append(memberships)
        if self.cov is not None:
            parts.append(self.cov)
        return np.hstack(parts)

    def _factorize(self, labels: dict[int, int] | None) -> tuple[CPModel, FitTrace]:
        solver_config = self.config.solver_config(omega=self.omega, seed=self.solver_seed)
        sup = None
        if labels is not None and self.omega > 0:
            # covariates join the supervised term only when the feature set uses them
            sup = Supervision(labels=labels, covariates=self.cov)
        return factorize(self.tensor, solver_config, sup)

    def shared_model(self) -> CPModel:
        if self._shared is None:
            self._shared = self._factorize(None)
        return self._shared[0]

    def builder(self):
        if self.feature_set == "covariates":
            cov = self.cov

            def build(train_idx, test_idx, rep, fold):
                return cov[train_idx], cov[test_idx]

            return build

        if self.omega == 0.0:
            # label-free factorization is identical for every fold; reuse it
            memberships = self.shared_model().u_patient
            X = self._with_covariates(memberships)

            def build(train_idx, test_idx, rep, fold):
                return X[train_idx], X[test_idx]

            return build

        def build(train_idx, test_idx, rep, fold):
            train_labels = {int(i): int(self.y[i]) for i in train_idx}
            model, _ = self._factorize(train_labels)
            X = self._with_covariates(model.u_patient)
            return X[train_idx], X[test_idx]

        return build

    def final_model(self) -> tuple[CPModel, FitTrace]:
        """Full-data model for phenotype reporting (all labels if supervised)."""
        if self.omega == 0.0:
            self.shared_model()
            return self._shared
        all_labels = {int(i): int(self.y[i]) for i in range(len(self.y))}
        return self._factorize(all_labels)


def _select_best_omega(means: dict[float, float]) -> float:
    """Highest mean AUC wins; ties break toward the smaller omega."""
    best_omega, best_mean = None, None
    for omega in sorted(means):
        if best_mean is None or means[omega] > best_mean:
            best_omega, best_mean = omega, means[omega]
    return best_omega


def _tune(config, prepared, feature_set, cond_index, master_seed) -> tuple[float, dict[float, float]]:
    positive = sorted({w for w in config.omega_grid if w > 0})
    if not config.omega_grid:
        raise InputError("omega grid is empty")
    if not positive:
        raise InputError("omega grid has no positive entries to tune over")
    tune_seed = child_seed(master_seed, cond_index, 2)
    means: dict[float, float] = {}
    for grid_index, omega in enumerate(positive):
        solver_seed = child_seed(master_seed, cond_index, 3, grid_index)
        evaluator = _ConditionEvaluator(config, prepared, feature_set, omega, solver_seed)
        report = repeated_cv(
            evaluator.builder(),
            evaluator.y,
            k=config.cv_k,
            reps=config.tune_reps,
            seed=tune_seed,
            entry=config.entry,
            exit=config.exit,
            n_boot=config.n_boot,
            ci_level=config.ci_level,
        )
        means[omega] = report.mean_auc
    return _select_best_omega(means), means


def tune_omega(config: ExperimentConfig, feature_set: str | None = None) -> tuple[float, dict[float, float]]:
    """Pick the positive omega with the best tuning-protocol mean CV AUC.

    Tuning runs on its own derived substream with ``tune_reps`` repetitions,
    so the final evaluation folds are never consulted.
    """
    config.validate()
    if feature_set is None:
        feature_set = "phenotypes_covariates" if config.use_covariates else "phenotypes"
    prepared = prepare_experiment(config)
    return _tune(config, prepared, feature_set, _condition_index(config, feature_set), config.seed)


def _condition_index(config: ExperimentConfig, feature_set: str) -> int:
    for idx, (_, fs, supervised) in enumerate(_condition_list(config)):
        if fs == feature_set and supervised:
            return idx
    return 0


def _selected_names(cv: CvReport, term_names) -> tuple[tuple[str, ...], ...]:
    return tuple(tuple(term_names[i] for i in terms) for terms in cv.selected_terms)


def run_experiment(config: ExperimentConfig) -> dict[str, EvalReport]:
    """Run the full condition grid and write all artifacts under out_dir."""
    config.validate()
    os.makedirs(config.out_dir, exist_ok=True)
    prepared = prepare_experiment(config)

    with _stage("artifacts"):
        save_cohort(prepared.cohort, os.path.join(config.out_dir, "cohort.json"))
        save_tensor(prepared.tensor, os.path.join(config.out_dir, "tensor.txt"))
        _write_json(os.path.join(config.out_dir, "tensor_stats.json"), prepared.stats.to_dict())

    patients = list(prepared.tensor.labels[0])
    y = np.array([prepared.cohort.labels[p] for p in patients], dtype=int)
    if len(y) == 0:
        raise InputError("no patients left after tensor construction")

    reports: dict[str, EvalReport] = {}
    tuning_log: dict[str, dict[float, float]] = {}
    for cond_index, (cond_id, feature_set, supervised) in enumerate(_condition_list(config)):
        with _stage(f"evaluate {cond_id}"):
            omega = 0.0
            if supervised:
                omega, means = _tune(config, prepared, feature_set, cond_index, config.seed)
                tuning_log[cond_id] = means
            solver_seed = child_seed(config.seed, cond_index, 0)
            cv_seed = child_seed(config.seed, cond_index, 1)
            evaluator = _ConditionEvaluator(config, prepared, feature_set, omega, solver_seed)
            cv_report = repeated_cv(
                evaluator.builder(),
                evaluator.y,
                k=config.cv_k,
                reps=config.cv_reps,
                seed=cv_seed,
                entry=config.entry,
                exit=config.exit,
                n_boot=config.n_boot,
                ci_level=config.ci_level,
            )

            cond_dir = os.path.join(config.out_dir, cond_id)
            os.makedirs(cond_dir, exist_ok=True)
            lengths = None
            term_names = _term_names(feature_set, config.rank)
            if feature_set != "covariates":
                model, trace = evaluator.final_model()
                phenotypes, lengths = export_phenotypes(model)
                save_model(model, os.path.join(cond_dir, "model.json"))
                trace.save_csv(os.path.join(cond_dir, "trace.csv"))
                with open(os.path.join(cond_dir, "phenotypes.txt"), "w", encoding="utf-8") as fh:
                    fh.write(
                        phenotype_report_text(
                            phenotypes,
                            lengths,
                            header_notes=(f"condition: {cond_id}", f"omega: {omega:g}"),
                        )
                    )
                _write_json(
                    os.path.join(cond_dir, "phenotypes.json"),
                    phenotype_report_dict(phenotypes, lengths),
                )

            report = EvalReport(
                condition=cond_id,
                feature_set=feature_set,
                supervised=supervised,
                omega=omega,
                cv=cv_report,
                term_names=term_names,
                selected_term_names=_selected_names(cv_report, term_names),
                phenotype_lengths=lengths,
            )
            _write_json(os.path.join(cond_dir, "report.json"), report.to_dict())
            reports[cond_id] = report

    with _stage("summary"):
        _write_summary(config, prepared, reports, tuning_log)
    return reports


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _grid_cell(report: EvalReport | None) -> str:
    if report is None:
        return "--"
    lo, hi = report.cv.ci
    return f"{report.cv.mean_auc:.3f} ({lo:.3f}, {hi:.3f})"


def _write_summary(config, prepared, reports, tuning_log) -> None:
    feature_rows = [
        ("covariates", "Covariates only"),
        ("phenotypes", "Phenotypes only"),
        ("phenotypes_covariates", "Phenotypes + covariates"),
    ]
    by_key = {(r.feature_set, r.supervised): r for r in reports.values()}
    lines = [f"prediction grid summary (mode: {config.mode})"]
    header = f"{'Features':<26}{'Unsupervised':<24}{'Supervised':<24}"
    lines.append(header)
    grid: dict = {}
    for key, label in feature_rows:
        unsup = by_key.get((key, False))
        sup = by_key.get((key, True))
        if unsup is None and sup is None:
            continue
        lines.append(f"{label:<26}{_grid_cell(unsup):<24}{_grid_cell(sup):<24}")
        grid[key] = {
            "unsupervised": None if unsup is None else unsup.to_dict(),
            "supervised": None if sup is None else sup.to_dict(),
        }
    summary_text = "\n".join(lines) + "\n"
    with open(os.path.join(config.out_dir, "summary.txt"), "w", encoding="utf-8") as fh:
        fh.write(summary_text)
    _write_json(os.path.join(config.out_dir, "summary.json"), grid)

    provenance = [
        "phenotensor run provenance",
        f"version: {__version__}",
        f"master seed: {config.seed}",
        f"correspondence mode: {config.mode}",
        f"rank: {config.rank}",
        f"omega grid: {', '.join(f'{w:g}' for w in config.omega_grid)}",
        f"cv: {config.cv_k} folds x {config.cv_reps} reps (tuning reps: {config.tune_reps})",
        f"stepwise entry/exit: {config.entry:g}/{config.exit:g}",
        f"truncation percentile: {config.truncate_percentile:g}",
        f"prevalence thresholds: dx {config.dx_min_frac:g}, med {config.med_min_frac:g}",
        f"horizon/window years: {config.horizon_years:g}/{config.window_years:g}",
        "conventions:",
    ]
    provenance.extend(f"  - {note}" for note in CONVENTION_NOTES)
    if tuning_log:
        provenance.append("omega tuning (mean AUC per omega):")
        for cond_id in sorted(tuning_log):
            cells = ", ".join(f"{w:g}: {m:.4f}" for w, m in sorted(tuning_log[cond_id].items()))
            provenance.append(f"  - {cond_id}: {cells}")
    provenance.append("cohort notes:")
    provenance.extend(f"  - {note}" for note in prepared.cohort.notes)
    with open(os.path.join(config.out_dir, "provenance.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(provenance) + "\n")


def report_tensor_stats(stats_by_condition: dict[str, TensorStats]) -> tuple[str, dict]:
    """Side-by-side tensor characteristics table (text plus JSON twin)."""
    if not stats_by_condition:
        raise InputError("no tensor statistics to report")
    rows = (
        ("Patients", "n_patients", "d"),
        ("Diagnoses", "n_diagnoses", "d"),
        ("Medications", "n_medications", "d"),
        ("Dx-med pairs", "n_dx_med_pairs", "d"),
        ("Mean age at diagnosis", "mean_age", ".1f"),
        ("Deaths at horizon", "deaths_at_horizon", "d"),
        ("Median co-occurrences per patient", "median_cooccurrences_per_patient", "g"),
        ("Total co-occurrences", "total_cooccurrences", "d"),
    )
    labels = list(stats_by_condition)
    width = max(16, *(len(label) + 2 for label in labels))
    lines = ["tensor characteristics"]
    lines.append(f"{'':<36}" + "".join(f"{label:>{width}}" for label in labels))
    for title, attr, fmt in rows:
        cells = "".join(
            f"{format(getattr(stats_by_condition[label], attr), fmt):>{width}}" for label in labels
        )
        lines.append(f"{title:<36}{cells}")
    empties = [label for label, stats in stats_by_condition.items() if stats.n_patients == 0]
    for label in empties:
        lines.append(f"warning: condition {label!r} has an empty tensor")
    text = "\n".join(lines) + "\n"
    payload = {label: stats.to_dict() for label, stats in stats_by_condition.items()}
    return text, payload
