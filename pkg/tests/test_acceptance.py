"""Acceptance suite: one test per release criterion, with independent oracles.

Every test prints a PASS line naming its criterion; a failed assertion is
the corresponding FAIL. The heavy directional check (criterion 8) runs a
full five-seed experiment grid and stays under its 15-minute budget.
"""

import dataclasses
import math
import os
import time

import numpy as np
import pytest

from phenotensor.cp import export_phenotypes
from phenotensor.logit import (
    auc,
    chi2_sf,
    fit_logistic,
    lr_pvalue,
    sigmoid,
    stepwise_select,
)
from phenotensor.pipeline import ExperimentConfig, prepare_experiment, run_experiment
from phenotensor.simulate import SyntheticSpec, simulate_cohort
from phenotensor.solver import (
    SolverConfig,
    Supervision,
    combined_objective,
    factorize,
    other_mode_gradient,
    patient_mode_gradient,
)
from phenotensor.tensor import (
    EQUAL_CORRESPONDENCE,
    INDICATION_FILTERED,
    IndicationMap,
    count_cooccurrences,
)

from conftest import make_encounter, make_table, random_model, random_small_tensor
from test_cp import dense_frobenius, dense_mttkrp
from test_logit import brute_force_auc
from test_solver import cosine_match, finite_difference, planted_tensor
from test_tensor import brute_force_counts, entries_by_name


def report(line):
    print(f"\nPASS: {line}")


def test_gradient_oracle():
    """Criterion 1: gradients match central finite differences (<= 1e-5)."""
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    checked = 0
    for trial in range(50):
        t = random_small_tensor(rng, max_dim=4)
        R = int(rng.integers(1, 4))
        m = random_model(rng, t.dims, R)
        omega = (0.0, 0.1, 1.0)[trial % 3]
        with_cov = bool(rng.random() < 0.5)
        n_cov = 2 if with_cov else 0
        cov = rng.random((t.dims[0], n_cov)) if with_cov else None
        n_labeled = int(rng.integers(1, t.dims[0] + 1))
        chosen = rng.choice(t.dims[0], size=n_labeled, replace=False)
        labels = {int(i): int(rng.random() < 0.5) for i in chosen}
        sup = Supervision(labels=labels, covariates=cov,
                          beta=rng.normal(scale=0.8, size=1 + R + n_cov))

        got = patient_mode_gradient(m, t, sup, omega)
        fd = finite_difference(
            lambda U: combined_objective(dataclasses.replace(m, u_patient=U), t, sup, omega),
            m.u_patient,
        )
        denom = max(float(np.abs(fd).max()), 1e-10)
        assert float(np.abs(got - fd).max()) / denom <= 1e-5

        for mode, attr in ((2, "u_dx"), (3, "u_med")):
            got = other_mode_gradient(m, t, mode)
            fd = finite_difference(
                lambda U: combined_objective(dataclasses.replace(m, **{attr: U}), t, None, 0.0),
                getattr(m, attr),
            )
            denom = max(float(np.abs(fd).max()), 1e-10)
            assert float(np.abs(got - fd).max()) / denom <= 1e-5
        checked += 1
    elapsed = time.perf_counter() - start
    assert checked == 50
    assert elapsed < 10.0, f"gradient oracle took {elapsed:.1f} s"
    report(f"gradient oracle: 50 instances, omega in {{0, 0.1, 1}}, rel err <= 1e-5 "
           f"({elapsed:.1f} s)")


def test_fit_oracle():
    """Criterion 2: frobenius_fit and mttkrp match dense brute force (1e-9)."""
    from phenotensor.cp import frobenius_fit, mttkrp

    rng = np.random.default_rng(202)
    for _ in range(100):
        t = random_small_tensor(rng, max_dim=4)
        R = int(rng.integers(1, 4))
        m = random_model(rng, t.dims, R)
        assert frobenius_fit(m, t) == pytest.approx(dense_frobenius(m, t), rel=1e-9, abs=1e-9)
        for mode in (1, 2, 3):
            np.testing.assert_allclose(
                mttkrp(t, m, mode), dense_mttkrp(t, m, mode), rtol=1e-9, atol=1e-9
            )
    report("fit oracle: frobenius_fit and mttkrp match dense brute force on 100 tensors")


def _synthetic_tensor(rng, dims=(20, 6, 5), nnz=60):
    entries = {}
    while len(entries) < nnz:
        key = tuple(int(rng.integers(d)) for d in dims)
        entries[key] = int(rng.integers(1, 6))
    from phenotensor.tensor import tensor_from_entries

    labels = tuple(tuple(f"{ax}{i:03d}" for i in range(dims[a])) for a, ax in enumerate("pdm"))
    return tensor_from_entries(dims, labels, entries)


def test_monotone_objective():
    """Criterion 3: 20 seeded runs are non-increasing and non-negative."""
    runs = 0
    for seed in range(10):
        rng = np.random.default_rng(300 + seed)
        t = _synthetic_tensor(rng)
        for omega in (0.0, 1.0):
            sup = None
            if omega > 0:
                labels = {i: int(rng.random() < 0.4) for i in range(t.dims[0])}
                labels[0], labels[1] = 0, 1
                sup = Supervision(labels=labels, covariates=rng.random((t.dims[0], 2)))
            config = SolverConfig(rank=3, omega=omega, max_outer_iters=40,
                                  rel_tol=1e-12, seed=seed)
            _, trace = factorize(t, config, sup)
            objective = np.array(trace.objective)
            assert np.all(np.diff(objective) <= 0.0), f"seed {seed} omega {omega}"
            assert min(trace.min_factor) >= 0.0
            runs += 1
    assert runs == 20
    report("monotone objective: 20 runs (omega in {0, 1}) non-increasing, factors >= 0")


def test_exact_recovery():
    """Criterion 4: noise-free rank-1/rank-2 tensors recovered to 1e-3."""
    start = time.perf_counter()
    for rank, n_patients, seed in ((1, 30, 0), (2, 45, 1)):
        rng = np.random.default_rng(400 + seed)
        t, truth = planted_tensor(rng, n_patients, rank)
        config = SolverConfig(rank=rank, omega=0.0, max_outer_iters=500,
                              rel_tol=1e-13, seed=seed)
        model, trace = factorize(t, config)
        assert trace.n_iterations() <= 500
        x_norm = math.sqrt(float((t.values.astype(float) ** 2).sum()))
        rel_err = math.sqrt(max(trace.frobenius[-1], 0.0)) / x_norm
        assert rel_err <= 1e-3, f"rank {rank}: relative error {rel_err:.2e}"
        assert cosine_match(model, truth) >= 0.99
    elapsed = time.perf_counter() - start
    assert elapsed < 60.0
    report(f"exact recovery: rank-1 and rank-2 planted tensors, rel err <= 1e-3, "
           f"cosine >= 0.99 ({elapsed:.1f} s)")


def test_auc_oracle():
    """Criterion 5: rank-method AUC equals brute-force concordance exactly."""
    rng = np.random.default_rng(505)
    for _ in range(1000):
        n = int(rng.integers(2, 51))
        y = rng.integers(0, 2, n)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        if rng.random() < 0.5:
            scores = rng.integers(0, 6, n).astype(float)
        else:
            scores = rng.normal(size=n)
        assert auc(scores, y) == brute_force_auc(scores, y)
    report("AUC oracle: rank method equals brute force on 1000 vectors, exactly")


def test_logistic_oracle():
    """Criterion 6: intercept-only fits and chi-square LR reference points."""
    rng = np.random.default_rng(606)
    for p_target in (0.5, 0.25, 0.1, 0.73):
        n = 200
        y = np.zeros(n)
        y[: int(round(p_target * n))] = 1.0
        fit = fit_logistic(np.zeros((n, 0)), y)
        mean = y.mean()
        assert fit.coefficients[0] == pytest.approx(math.log(mean / (1 - mean)), abs=1e-8)
    assert chi2_sf(3.841, 1) == pytest.approx(0.05, abs=1e-3)
    assert chi2_sf(6.635, 1) == pytest.approx(0.01, abs=1e-3)
    report("logistic oracle: intercept-only = logit(mean); LR tails at 3.841/6.635")


def test_stepwise_contract():
    """Criterion 7: post-hoc entry/exit contract and planted-signal power."""
    # null simulations: the terminal model must satisfy both threshold rules
    for seed in range(100):
        rng = np.random.default_rng(10_000 + seed)
        X = rng.normal(size=(200, 10))
        y = (rng.random(200) < 0.5).astype(int)
        if y.min() == y.max():
            y[0] = 1 - y[0]
        result = stepwise_select(X, y)
        selected = set(result.selected)
        for j in sorted(selected):
            reduced = fit_logistic(X[:, sorted(selected - {j})], y)
            assert lr_pvalue(result.fit, reduced, 1) <= 0.10 + 1e-12
        for j in range(10):
            if j in selected:
                continue
            full = fit_logistic(X[:, sorted(selected | {j})], y)
            assert lr_pvalue(full, result.fit, 1) >= 0.05 - 1e-12

    # planted signal at two standard deviations is found nearly always
    hits = 0
    for seed in range(100):
        rng = np.random.default_rng(20_000 + seed)
        X = rng.normal(size=(200, 10))
        z = 2.0 * X[:, 4]
        y = (rng.random(200) < sigmoid(z)).astype(int)
        if y.min() == y.max():
            continue
        result = stepwise_select(X, y)
        hits += 4 in result.selected
    assert hits >= 95, f"informative term selected only {hits}/100 times"
    report(f"stepwise contract: 100 null runs satisfy entry/exit thresholds; "
           f"planted term selected {hits}/100")


def _directional_config(sim, out_dir, seed):
    return ExperimentConfig(
        encounters=sim.paths["encounters"],
        demographics=sim.paths["demographics"],
        income=sim.paths["income"],
        indications=sim.paths["indications"],
        out_dir=str(out_dir),
        seed=seed,
        mode=EQUAL_CORRESPONDENCE,
        use_covariates=True,
        omega_grid=(0.0, 0.02, 0.1),
        rank=8,
        max_outer_iters=35,
        rel_tol=1e-5,
        cv_k=10,
        cv_reps=5,
        tune_reps=1,
        n_boot=500,
    )


def test_directional_prediction_grid(tmp_path):
    """Criterion 8: synthetic grid ordering of mean CV AUCs over 5 seeds."""
    start = time.perf_counter()
    cells = {key: [] for key in (
        ("phenotypes", False), ("phenotypes", True),
        ("phenotypes_covariates", False), ("phenotypes_covariates", True),
    )}
    omegas = []
    for seed in range(5):
        spec = SyntheticSpec(n_patients=2000, n_dx=24, n_med=16, true_rank=5,
                             noise=0.01, lambda_scale=3.0, membership_prob=0.35,
                             seed=700 + seed)
        sim = simulate_cohort(spec, tmp_path / f"sim{seed}")
        config = _directional_config(sim, tmp_path / f"out{seed}", seed)
        reports = run_experiment(config)
        for (feature_set, supervised), values in cells.items():
            cond = f"{feature_set}__{'supervised' if supervised else 'unsupervised'}"
            values.append(reports[cond].cv.mean_auc)
        omegas.append(reports["phenotypes__supervised"].omega)
        # covariates-only must not have produced any solver trace
        assert not os.path.exists(tmp_path / f"out{seed}" / "covariates_only" / "trace.csv")

    mean = {key: float(np.mean(vals)) for key, vals in cells.items()}
    elapsed = time.perf_counter() - start

    assert all(w > 0 for w in omegas), "tuning must pick a positive omega"
    for supervised in (False, True):
        assert mean[("phenotypes_covariates", supervised)] >= mean[("phenotypes", supervised)]
        assert mean[("phenotypes", supervised)] >= 0.5 + 0.02
    # stronger stated margin for the unsupervised comparison
    assert mean[("phenotypes_covariates", False)] - mean[("phenotypes", False)] >= 0.02
    for feature_set in ("phenotypes", "phenotypes_covariates"):
        assert mean[(feature_set, True)] >= mean[(feature_set, False)] - 0.01
    assert elapsed < 15 * 60, f"directional grid took {elapsed:.0f} s"
    report(
        "directional prediction grid (5 seeds): "
        f"phen+cov {mean[('phenotypes_covariates', False)]:.3f}/"
        f"{mean[('phenotypes_covariates', True)]:.3f} >= "
        f"phen {mean[('phenotypes', False)]:.3f}/{mean[('phenotypes', True)]:.3f} "
        f">= 0.52; supervised within 0.01 ({elapsed:.0f} s)"
    )


def test_directional_phenotype_lengths(tmp_path):
    """Criterion 9: indication filtering shortens phenotypes (>0 and >0.1)."""
    per_mode = {EQUAL_CORRESPONDENCE: [], INDICATION_FILTERED: []}
    for seed in range(5):
        spec = SyntheticSpec(n_patients=400, n_dx=18, n_med=12, true_rank=4,
                             noise=0.02, lambda_scale=3.0, membership_prob=0.4,
                             comorbid_dx_prob=0.4, seed=800 + seed)
        sim = simulate_cohort(spec, tmp_path / f"sim{seed}")
        for mode in per_mode:
            config = ExperimentConfig(
                encounters=sim.paths["encounters"],
                demographics=sim.paths["demographics"],
                income=sim.paths["income"],
                indications=sim.paths["indications"],
                out_dir=str(tmp_path / f"out{seed}_{mode}"),
                seed=seed, mode=mode, use_covariates=False, omega_grid=(0.0,),
                rank=6, max_outer_iters=60, rel_tol=1e-7,
                dx_min_frac=0.005, med_min_frac=0.005,
            )
            prepared = prepare_experiment(config)
            model, _ = factorize(
                prepared.tensor,
                SolverConfig(rank=6, max_outer_iters=60, rel_tol=1e-7, seed=seed),
            )
            _, lengths = export_phenotypes(model)
            per_mode[mode].append([
                lengths.mean_diagnoses_gt0, lengths.mean_medications_gt0,
                lengths.mean_diagnoses_gt_threshold, lengths.mean_medications_gt_threshold,
            ])
    equal = np.mean(per_mode[EQUAL_CORRESPONDENCE], axis=0)
    indicated = np.mean(per_mode[INDICATION_FILTERED], axis=0)
    names = ("dx > 0", "med > 0", "dx > 0.1", "med > 0.1")
    for name, eq_mean, ind_mean in zip(names, equal, indicated):
        assert ind_mean < eq_mean, f"{name}: indicated {ind_mean:.2f} !< equal {eq_mean:.2f}"
    report(
        "directional phenotype lengths (5 seeds): indicated < equal at every "
        "threshold (" + ", ".join(
            f"{n}: {i:.2f} < {e:.2f}" for n, e, i in zip(names, equal, indicated)
        ) + ")"
    )


def test_counting_oracle():
    """Criterion 10: counting equals a brute-force triple loop, both modes."""
    rng = np.random.default_rng(909)
    for _ in range(50):
        n_pat = int(rng.integers(1, 6))
        patients = [f"p{i}" for i in range(n_pat)]
        dx_pool = [f"d{j}" for j in range(5)]
        med_pool = [f"m{k}" for k in range(5)]
        encounters = []
        for e in range(int(rng.integers(1, 21))):
            pid = patients[int(rng.integers(n_pat))]
            dx = list(rng.choice(dx_pool, size=int(rng.integers(0, 5)), replace=False))
            med = list(rng.choice(med_pool, size=int(rng.integers(0, 5)), replace=False))
            encounters.append(make_encounter(pid, f"e{e}", "2010-01-05", dx=dx, med=med))
        table = make_table(encounters, patients)
        pairs = frozenset(
            (d, m) for d in dx_pool for m in med_pool if rng.random() < 0.5
        )
        indications = IndicationMap(pairs=pairs)
        for mode, ind in ((EQUAL_CORRESPONDENCE, None), (INDICATION_FILTERED, indications)):
            got = entries_by_name(count_cooccurrences(table, mode, ind))
            assert got == brute_force_counts(table, mode, ind)
    report("counting oracle: 50 mini-cohorts match the brute-force triple loop, both modes")


def test_protocol_conformance():
    """Criterion 11: defaults match the published protocol."""
    import inspect

    from phenotensor.cohort import assign_outcomes as outcomes_op
    from phenotensor.cohort import filter_by_prevalence as prevalence_op
    from phenotensor.cp import export_phenotypes as export_op
    from phenotensor.logit import repeated_cv, stepwise_select as stepwise_op
    from phenotensor.tensor import truncate_counts as truncate_op

    solver_defaults = SolverConfig()
    assert solver_defaults.rank == 50

    assert inspect.signature(truncate_op).parameters["percentile"].default == 0.99

    prevalence_params = inspect.signature(prevalence_op).parameters
    assert prevalence_params["dx_min_frac"].default == 0.01
    assert prevalence_params["med_min_frac"].default == 0.005

    outcome_params = inspect.signature(outcomes_op).parameters
    assert outcome_params["horizon_years"].default == 5
    assert outcome_params["window_years"].default == 1

    stepwise_params = inspect.signature(stepwise_op).parameters
    assert stepwise_params["entry"].default == 0.05
    assert stepwise_params["exit"].default == 0.10

    cv_params = inspect.signature(repeated_cv).parameters
    assert cv_params["k"].default == 10
    assert cv_params["reps"].default == 5

    assert inspect.signature(export_op).parameters["display_threshold"].default == 0.1

    config_fields = {f.name: f.default for f in dataclasses.fields(ExperimentConfig)}
    assert config_fields["rank"] == 50
    assert config_fields["truncate_percentile"] == 0.99
    assert config_fields["entry"] == 0.05
    assert config_fields["exit"] == 0.10
    assert config_fields["cv_k"] == 10
    assert config_fields["cv_reps"] == 5
    assert config_fields["horizon_years"] == 5.0
    assert config_fields["window_years"] == 1.0
    assert config_fields["dx_min_frac"] == 0.01
    assert config_fields["med_min_frac"] == 0.005
    report("protocol conformance: rank 50, truncation 0.99, stepwise 0.05/0.10, "
           "CV 10x5, export threshold 0.1")
