from pathlib import Path

import pytest

from phenotensor.errors import InputError
from phenotensor.pipeline import (
    ExperimentConfig,
    _select_best_omega,
    child_seed,
    prepare_experiment,
    report_tensor_stats,
    run_experiment,
    tune_omega,
)
from phenotensor.simulate import SyntheticSpec, simulate_cohort
from phenotensor.tensor import TensorStats


def small_config(tmp_path, seed=4, **overrides):
    sim_dir = tmp_path / "sim"
    spec = SyntheticSpec(n_patients=120, n_dx=9, n_med=6, true_rank=3, noise=0.02,
                         lambda_scale=3.0, membership_prob=0.4, seed=seed)
    sim = simulate_cohort(spec, sim_dir)
    kwargs = dict(
        encounters=sim.paths["encounters"],
        demographics=sim.paths["demographics"],
        income=sim.paths["income"],
        indications=sim.paths["indications"],
        out_dir=str(tmp_path / "out"),
        seed=seed,
        mode="equal",
        use_covariates=True,
        omega_grid=(0.0, 0.5),
        rank=3,
        max_outer_iters=15,
        rel_tol=1e-6,
        cv_k=3,
        cv_reps=1,
        tune_reps=1,
        n_boot=200,
        dx_min_frac=0.005,
        med_min_frac=0.005,
    )
    kwargs.update(overrides)
    return ExperimentConfig(**kwargs), sim


def tree_bytes(root):
    out = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = path.read_bytes()
    return out


class TestPrepare:
    def test_prepare_counts_and_stats(self, tmp_path):
        config, sim = small_config(tmp_path)
        prepared = prepare_experiment(config)
        assert prepared.tensor.nnz > 0
        assert prepared.stats.n_patients == prepared.tensor.dims[0]
        assert set(prepared.cohort.labels) == set(prepared.tensor.labels[0])

    def test_indicated_mode_requires_file(self, tmp_path):
        config, _ = small_config(tmp_path)
        import dataclasses

        bad = dataclasses.replace(config, mode="indicated", indications=None)
        with pytest.raises(InputError):
            bad.validate()

    def test_stage_tagging(self, tmp_path):
        config, _ = small_config(tmp_path)
        import dataclasses

        broken = dataclasses.replace(config, encounters=str(tmp_path / "missing.csv"))
        with pytest.raises(InputError, match="stage ingest"):
            prepare_experiment(broken)


class TestRunExperiment:
    def test_grid_and_artifacts(self, tmp_path):
        config, _ = small_config(tmp_path)
        reports = run_experiment(config)
        assert set(reports) == {
            "covariates_only",
            "phenotypes__unsupervised",
            "phenotypes__supervised",
            "phenotypes_covariates__unsupervised",
            "phenotypes_covariates__supervised",
        }
        out = Path(config.out_dir)
        assert (out / "summary.txt").exists()
        assert (out / "summary.json").exists()
        assert (out / "provenance.txt").exists()
        assert (out / "tensor.txt").exists()
        # covariates-only must not factorize: no trace, no model
        cov_dir = out / "covariates_only"
        assert (cov_dir / "report.json").exists()
        assert not (cov_dir / "trace.csv").exists()
        assert not (cov_dir / "model.json").exists()
        # phenotype conditions carry model, trace, and phenotype reports
        ph_dir = out / "phenotypes__unsupervised"
        for name in ("model.json", "trace.csv", "phenotypes.txt", "phenotypes.json"):
            assert (ph_dir / name).exists()
        for report in reports.values():
            assert 0.0 <= report.cv.mean_auc <= 1.0
            assert report.cv.ci[0] <= report.cv.ci[1]

    def test_supervised_condition_used_positive_omega(self, tmp_path):
        config, _ = small_config(tmp_path)
        reports = run_experiment(config)
        assert reports["phenotypes__supervised"].omega > 0
        assert reports["phenotypes__unsupervised"].omega == 0.0

    def test_rerun_is_byte_identical(self, tmp_path):
        config, _ = small_config(tmp_path)
        run_experiment(config)
        first = tree_bytes(config.out_dir)
        run_experiment(config)
        second = tree_bytes(config.out_dir)
        assert first == second

    def test_omega_grid_zero_only_runs_unsupervised_cells(self, tmp_path):
        config, _ = small_config(tmp_path, use_covariates=False, omega_grid=(0.0,))
        reports = run_experiment(config)
        assert set(reports) == {"phenotypes__unsupervised"}

    def test_selected_term_names_valid(self, tmp_path):
        config, _ = small_config(tmp_path)
        reports = run_experiment(config)
        report = reports["phenotypes_covariates__unsupervised"]
        valid = set(report.term_names)
        for fold_terms in report.selected_term_names:
            assert set(fold_terms) <= valid


class TestTuneOmega:
    def test_single_point_grid(self, tmp_path):
        config, _ = small_config(tmp_path, omega_grid=(0.25,))
        best, means = tune_omega(config, feature_set="phenotypes")
        assert best == 0.25
        assert set(means) == {0.25}

    def test_tie_breaks_toward_smaller(self):
        assert _select_best_omega({0.1: 0.6, 1.0: 0.6, 10.0: 0.6}) == 0.1
        assert _select_best_omega({0.1: 0.5, 1.0: 0.7, 10.0: 0.7}) == 1.0

    def test_no_positive_entries(self, tmp_path):
        config, _ = small_config(tmp_path, omega_grid=(0.0,))
        with pytest.raises(InputError):
            tune_omega(config)


class TestConfigFile:
    def test_round_trip_parse(self, tmp_path):
        sim_dir = tmp_path / "sim"
        spec = SyntheticSpec(n_patients=40, n_dx=6, n_med=5, true_rank=2, seed=1)
        sim = simulate_cohort(spec, sim_dir)
        cfg_path = tmp_path / "experiment.cfg"
        cfg_path.write_text(
            "\n".join(
                [
                    "# experiment configuration",
                    "encounters = sim/encounters.csv",
                    "demographics = sim/demographics.csv",
                    "income = sim/income.csv",
                    "indications = sim/indications.csv",
                    "mode = equal",
                    "use_covariates = true",
                    "omega_grid = 0, 0.1, 1",
                    "rank = 4",
                    "cv_k = 3",
                    "cv_reps = 2",
                    "out_dir = out",
                ]
            )
            + "\n",
            encoding="utf-8",
        )
        config = ExperimentConfig.from_file(cfg_path, seed=9)
        assert config.seed == 9
        assert config.rank == 4
        assert config.omega_grid == (0.0, 0.1, 1.0)
        assert config.encounters == str(tmp_path / "sim" / "encounters.csv")
        assert config.out_dir == str(tmp_path / "out")

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("bogus = 1\n", encoding="utf-8")
        with pytest.raises(InputError, match="unknown key"):
            ExperimentConfig.from_file(cfg, seed=1)

    def test_missing_seed(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("encounters = a\ndemographics = b\nincome = c\nout_dir = d\n",
                       encoding="utf-8")
        with pytest.raises(InputError, match="seed"):
            ExperimentConfig.from_file(cfg)


class TestReportTensorStats:
    def _stats(self, n):
        return TensorStats(n_patients=n, n_diagnoses=5, n_medications=4, n_dx_med_pairs=9,
                           median_cooccurrences_per_patient=3.0, total_cooccurrences=60,
                           deaths_at_horizon=7, mean_age=61.5)

    def test_identical_columns_for_identical_stats(self):
        text, payload = report_tensor_stats({"All": self._stats(10), "Ind.": self._stats(10)})
        assert payload["All"] == payload["Ind."]
        assert "Patients" in text and "Total co-occurrences" in text

    def test_filtered_patient_count_leq(self, tmp_path):
        config, sim = small_config(tmp_path)
        import dataclasses

        eq = prepare_experiment(config).stats
        ind = prepare_experiment(dataclasses.replace(config, mode="indicated")).stats
        assert ind.n_patients <= eq.n_patients
        assert ind.total_cooccurrences <= eq.total_cooccurrences
        text, _ = report_tensor_stats({"All": eq, "Ind.": ind})
        assert text.count("warning") == 0

    def test_empty_stats_warn(self):
        empty = TensorStats(0, 0, 0, 0, 0.0, 0, 0, 0.0)
        text, _ = report_tensor_stats({"All": empty})
        assert "warning" in text

    def test_no_stats_errors(self):
        with pytest.raises(InputError):
            report_tensor_stats({})


def test_child_seed_is_stable():
    assert child_seed(7, 1, 2) == child_seed(7, 1, 2)
    assert child_seed(7, 1, 2) != child_seed(7, 2, 1)
    assert child_seed(7, 1) >= 0
