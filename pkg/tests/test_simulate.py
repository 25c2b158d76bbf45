import filecmp
import json

import numpy as np
import pytest

from phenotensor.cohort import assign_outcomes, load_tables
from phenotensor.errors import InputError
from phenotensor.logit import auc
from phenotensor.simulate import SyntheticSpec, simulate_cohort
from phenotensor.solver import SolverConfig, factorize
from phenotensor.tensor import count_cooccurrences

from test_solver import cosine_match


SMALL = SyntheticSpec(n_patients=80, n_dx=12, n_med=8, true_rank=3, noise=0.02,
                      lambda_scale=3.0, seed=7)


def ingest(sim):
    table = load_tables(sim.paths["encounters"], sim.paths["demographics"], sim.paths["income"])
    return assign_outcomes(table)


class TestDeterminism:
    def test_same_seed_identical_files(self, tmp_path):
        a = simulate_cohort(SMALL, tmp_path / "a")
        b = simulate_cohort(SMALL, tmp_path / "b")
        for key in a.paths:
            assert filecmp.cmp(a.paths[key], b.paths[key], shallow=False), key

    def test_different_seed_differs(self, tmp_path):
        a = simulate_cohort(SMALL, tmp_path / "a")
        import dataclasses

        b = simulate_cohort(dataclasses.replace(SMALL, seed=8), tmp_path / "b")
        assert not filecmp.cmp(a.paths["encounters"], b.paths["encounters"], shallow=False)


class TestRoundTrip:
    def test_files_reproduce_counts_and_labels(self, tmp_path):
        sim = simulate_cohort(SMALL, tmp_path)
        table = ingest(sim)
        assert set(table.demographics) == set(sim.patient_ids)
        # labels from dates must equal the sampled labels
        for i, pid in enumerate(sim.patient_ids):
            assert table.labels[pid] == sim.labels[i], pid
        # equal-correspondence counting must reproduce the sampled tensor,
        # except that patients without encounters have no rows anywhere
        tensor = count_cooccurrences(table)
        got = {
            (tensor.labels[0][i], tensor.labels[1][j], tensor.labels[2][k]): int(v)
            for (i, j, k), v in zip(tensor.coords, tensor.values)
        }
        want = {
            (sim.patient_ids[i], sim.dx_codes[j], sim.med_names[k]): int(v)
            for (i, j, k), v in zip(sim.coords, sim.values)
        }
        assert got == want

    def test_covariates_survive_ingest(self, tmp_path):
        sim = simulate_cohort(SMALL, tmp_path)
        table = ingest(sim)
        got = np.array([table.covariates[pid].as_tuple() for pid in sim.patient_ids])
        np.testing.assert_allclose(got, sim.covariates)

    def test_truth_file_matches_memory(self, tmp_path):
        sim = simulate_cohort(SMALL, tmp_path)
        with open(sim.paths["truth"], encoding="utf-8") as fh:
            truth = json.load(fh)
        np.testing.assert_allclose(np.asarray(truth["lambda"]), sim.lam)
        np.testing.assert_allclose(np.asarray(truth["factors"]["patient"]), sim.u_patient)
        assert truth["ids"]["patients"] == sim.patient_ids

    def test_indications_cover_all_planted_pairs(self, tmp_path):
        sim = simulate_cohort(SMALL, tmp_path)
        planted = set()
        for r in range(SMALL.true_rank):
            dx_sup = np.flatnonzero(sim.u_dx[:, r] > 0)
            med_sup = np.flatnonzero(sim.u_med[:, r] > 0)
            for d in dx_sup:
                for m in med_sup:
                    planted.add((sim.dx_codes[d], sim.med_names[m]))
        assert planted == sim.indication_pairs


class TestNoiseFreeRecovery:
    def test_rank1_exact_tensor_and_recovery(self, tmp_path):
        spec = SyntheticSpec(n_patients=40, n_dx=6, n_med=5, true_rank=1, noise=0.0,
                             lambda_scale=4.0, membership_prob=0.5, seed=3)
        sim = simulate_cohort(spec, tmp_path)
        # exact rank 1: every nonzero equals lambda on the support product
        dense = np.zeros((40, 6, 5))
        dense[sim.coords[:, 0], sim.coords[:, 1], sim.coords[:, 2]] = sim.values
        expected = np.einsum("ir,jr,kr,r->ijk", sim.u_patient, sim.u_dx, sim.u_med, sim.lam)
        np.testing.assert_array_equal(dense, expected)

        table = ingest(sim)
        tensor = count_cooccurrences(table)
        model, trace = factorize(tensor, SolverConfig(rank=1, max_outer_iters=300,
                                                      rel_tol=1e-12, seed=11))
        # align truth rows to the tensor's patient axis (untouched patients have no row)
        kept = [sim.patient_ids.index(p) for p in tensor.labels[0]]
        from phenotensor.cp import CPModel

        truth = CPModel(lam=sim.lam, u_patient=sim.u_patient[kept],
                        u_dx=sim.u_dx, u_med=sim.u_med)
        assert cosine_match(model, truth) >= 0.99


class TestLabelModel:
    def test_null_labels_give_half_auc(self, tmp_path):
        spec = SyntheticSpec(n_patients=2000, n_dx=10, n_med=8, true_rank=2, noise=0.01,
                             pheno_effects=(0.0, 0.0), covariate_effects=(0.0,) * 6,
                             label_intercept=0.0, seed=5)
        sim = simulate_cohort(spec, tmp_path)
        score = sim.u_patient[:, 0] + 0.3 * sim.covariates[:, 4]
        assert abs(auc(score, sim.labels) - 0.5) <= 0.05

    def test_planted_effects_are_predictive(self, tmp_path):
        sim = simulate_cohort(SMALL, tmp_path)
        effects = SMALL.resolved_pheno_effects()
        score = sim.u_patient @ effects
        assert auc(score, sim.labels) > 0.6

    def test_degenerate_spec_raises(self, tmp_path):
        spec = SyntheticSpec(n_patients=30, n_dx=6, n_med=5, true_rank=2,
                             pheno_effects=(0.0, 0.0), covariate_effects=(0.0,) * 6,
                             label_intercept=-40.0, seed=1)
        with pytest.raises(InputError, match="degenerate"):
            simulate_cohort(spec, tmp_path)


class TestSpecValidation:
    def test_bad_dims(self):
        with pytest.raises(InputError):
            SyntheticSpec(n_patients=0).validate()

    def test_rank_exceeds_axis(self):
        with pytest.raises(InputError):
            SyntheticSpec(n_dx=3, n_med=3, true_rank=4).validate()

    def test_noise_range(self):
        with pytest.raises(InputError):
            SyntheticSpec(noise=1.0).validate()
