"""Synthetic cohort generator with planted factor structure.

Emits encounter/demographics/income files in the ingest formats, an
indication file covering the planted within-component pairs, and a ground
truth JSON (factors, importance weights, label model), so the whole
pipeline can be exercised and verified without any private data.

Counts are Poisson draws around the planted CP reconstruction; with
``noise == 0`` the factors are binary with integer weights and the counts
equal the reconstruction exactly, so the written tensor has exactly the
planted rank. Sparse noise turns each structural-zero cell into a 1 with
probability ``noise``, which is what indication filtering later removes:
component diagnosis/medication supports are disjoint, so every planted
count sits on an indicated pair while noise lands anywhere.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .cohort import COVARIATE_NAMES
from .errors import InputError

log = logging.getLogger(__name__)

_BASE_DATE = dt.date(2004, 1, 1)
_HORIZON_DAYS = 5 * 365
_WINDOW_DAYS = 360  # strictly inside the one-year observation window
_MAX_CELLS = 50_000_000

_DEFAULT_PHENO_EFFECTS = (2.5, -2.0, 1.6)
_DEFAULT_COVARIATE_EFFECTS = (0.5, 0.4, -0.4, 0.5, 1.0, -0.8)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of one synthetic cohort."""

    n_patients: int = 2000
    n_dx: int = 30
    n_med: int = 20
    true_rank: int = 6
    noise: float = 0.01
    lambda_scale: float = 3.0
    membership_prob: float = 0.35
    comorbid_dx_prob: float = 0.0
    label_intercept: float = -0.6
    pheno_effects: tuple[float, ...] | None = None
    covariate_effects: tuple[float, ...] | None = None
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_patients, self.n_dx, self.n_med) < 1:
            raise InputError("dimensions must be positive")
        if self.true_rank < 1:
            raise InputError("true_rank must be >= 1")
        if self.true_rank > min(self.n_dx, self.n_med):
            raise InputError("true_rank exceeds the diagnosis or medication axis")
        if not (0.0 <= self.noise < 1.0):
            raise InputError("noise must lie in [0, 1)")
        if self.lambda_scale <= 0:
            raise InputError("lambda_scale must be > 0")
        if not (0.0 < self.membership_prob <= 1.0):
            raise InputError("membership_prob must lie in (0, 1]")
        if not (0.0 <= self.comorbid_dx_prob < 1.0):
            raise InputError("comorbid_dx_prob must lie in [0, 1)")
        if self.n_patients * self.n_dx * self.n_med > _MAX_CELLS:
            raise InputError("spec too large to simulate densely")
        if self.covariate_effects is not None and len(self.covariate_effects) != 6:
            raise InputError("covariate_effects must have six entries")

    def resolved_pheno_effects(self) -> np.ndarray:
        if self.pheno_effects is not None:
            if len(self.pheno_effects) != self.true_rank:
                raise InputError("pheno_effects must have one entry per component")
            return np.asarray(self.pheno_effects, dtype=float)
        effects = np.zeros(self.true_rank)
        for r in range(min(self.true_rank, len(_DEFAULT_PHENO_EFFECTS))):
            effects[r] = _DEFAULT_PHENO_EFFECTS[r]
        return effects

    def resolved_covariate_effects(self) -> np.ndarray:
        if self.covariate_effects is not None:
            return np.asarray(self.covariate_effects, dtype=float)
        return np.asarray(_DEFAULT_COVARIATE_EFFECTS, dtype=float)


@dataclass
class SimulatedCohort:
    """In-memory ground truth plus the paths of the written files."""

    spec: SyntheticSpec
    paths: dict[str, str]
    patient_ids: list[str]
    dx_codes: list[str]
    med_names: list[str]
    lam: np.ndarray
    u_patient: np.ndarray
    u_dx: np.ndarray
    u_med: np.ndarray
    labels: np.ndarray
    covariates: np.ndarray
    coords: np.ndarray
    values: np.ndarray
    indication_pairs: set = field(default_factory=set)


def _component_supports(n_items: int, rank: int) -> list[np.ndarray]:
    return [np.asarray(chunk, dtype=np.int64) for chunk in np.array_split(np.arange(n_items), rank)]


def _planted_factors(spec: SyntheticSpec, rng: np.random.Generator):
    """Max-normalized factors with disjoint dx/med supports per component."""
    R = spec.true_rank
    dx_supports = _component_supports(spec.n_dx, R)
    med_supports = _component_supports(spec.n_med, R)
    binary = spec.noise == 0.0

    u_patient = np.zeros((spec.n_patients, R))
    member = rng.random((spec.n_patients, R)) < spec.membership_prob
    strength = rng.uniform(0.3, 1.0, size=(spec.n_patients, R))
    for r in range(R):
        if not member[:, r].any():
            member[int(rng.integers(0, spec.n_patients)), r] = True
        u_patient[:, r] = member[:, r] * (1.0 if binary else strength[:, r])
        top = u_patient[:, r].max()
        if top > 0:
            u_patient[:, r] /= top

    u_dx = np.zeros((spec.n_dx, R))
    u_med = np.zeros((spec.n_med, R))
    for r in range(R):
        dx_vals = np.ones(len(dx_supports[r])) if binary else rng.uniform(0.5, 1.0, len(dx_supports[r]))
        med_vals = np.ones(len(med_supports[r])) if binary else rng.uniform(0.5, 1.0, len(med_supports[r]))
        u_dx[dx_supports[r], r] = dx_vals / dx_vals.max()
        u_med[med_supports[r], r] = med_vals / med_vals.max()

    if binary:
        lam = np.maximum(1, np.round(spec.lambda_scale + rng.integers(0, 3, R))).astype(float)
    else:
        lam = spec.lambda_scale * rng.uniform(0.8, 1.2, R)

    indicated = set()
    for r in range(R):
        for d in dx_supports[r]:
            for m in med_supports[r]:
                indicated.add((int(d), int(m)))
    return u_patient, u_dx, u_med, lam, indicated


def simulate_cohort(spec: SyntheticSpec, out_dir) -> SimulatedCohort:
    """Generate a synthetic cohort and write every input file plus the truth."""
    spec.validate()
    os.makedirs(out_dir, exist_ok=True)
    rng = np.random.default_rng(spec.seed)

    width_p = max(5, len(str(spec.n_patients)))
    patient_ids = [f"p{i:0{width_p}d}" for i in range(spec.n_patients)]
    dx_codes = [f"dx{j:03d}" for j in range(spec.n_dx)]
    med_names = [f"med{k:03d}" for k in range(spec.n_med)]

    u_patient, u_dx, u_med, lam, indicated = _planted_factors(spec, rng)

    mean = np.einsum("ir,jr,kr,r->ijk", u_patient, u_dx, u_med, lam)
    if spec.noise == 0.0:
        counts = np.rint(mean).astype(np.int64)  # exact: binary factors, integer weights
    else:
        counts = rng.poisson(mean).astype(np.int64)
        structural_zero = mean == 0.0
        flips = structural_zero & (rng.random(mean.shape) < spec.noise)
        counts[flips] = 1

    coords = np.argwhere(counts > 0).astype(np.int64)
    values = counts[coords[:, 0], coords[:, 1], coords[:, 2]]

    # covariates: four indicators, age, and zip-level income
    is_male = (rng.random(spec.n_patients) < 0.5).astype(int)
    is_aa = (rng.random(spec.n_patients) < 0.2).astype(int)
    is_married = (rng.random(spec.n_patients) < 0.55).astype(int)
    is_medicaid_medicare = (rng.random(spec.n_patients) < 0.45).astype(int)
    age = np.clip(np.round(rng.normal(65.0, 10.0, spec.n_patients), 1), 30.0, 92.0)
    n_zips = min(25, max(2, spec.n_patients // 8))
    zip_codes = [f"60{600 + z:03d}" for z in range(n_zips)]
    zip_income = np.round(np.clip(rng.normal(55000.0, 18000.0, n_zips), 18000.0, 140000.0), -2)
    patient_zip = rng.integers(0, n_zips, spec.n_patients)
    income = zip_income[patient_zip]
    covariates = np.column_stack(
        [is_male, is_aa, is_married, is_medicaid_medicare, age, income]
    ).astype(float)

    cov_std = covariates.copy()
    cov_std[:, 4] = (covariates[:, 4] - 65.0) / 10.0
    cov_std[:, 5] = (covariates[:, 5] - 55000.0) / 18000.0
    pheno_effects = spec.resolved_pheno_effects()
    covariate_effects = spec.resolved_covariate_effects()
    z = spec.label_intercept + u_patient @ pheno_effects + cov_std @ covariate_effects
    labels = (rng.random(spec.n_patients) < 1.0 / (1.0 + np.exp(-z))).astype(int)
    if labels.min() == labels.max():
        raise InputError("degenerate synthetic cohort: labels have zero variance")

    diagnosis_offsets = rng.integers(0, 3000, spec.n_patients)
    diagnosis_dates = [_BASE_DATE + dt.timedelta(days=int(d)) for d in diagnosis_offsets]
    death_dates: list[dt.date | None] = []
    for i in range(spec.n_patients):
        if labels[i] == 1:
            death_dates.append(diagnosis_dates[i] + dt.timedelta(days=int(rng.integers(30, _HORIZON_DAYS + 1))))
        elif rng.random() < 0.35:
            death_dates.append(diagnosis_dates[i] + dt.timedelta(days=int(rng.integers(_HORIZON_DAYS + 1, 4200))))
        else:
            death_dates.append(None)

    paths = {
        "encounters": os.path.join(out_dir, "encounters.csv"),
        "demographics": os.path.join(out_dir, "demographics.csv"),
        "income": os.path.join(out_dir, "income.csv"),
        "indications": os.path.join(out_dir, "indications.csv"),
        "truth": os.path.join(out_dir, "truth.json"),
    }

    # a comorbid diagnosis from another active component mirrors the way
    # equal correspondence inflates cross pairs that are not indicated
    dx_component = np.zeros(spec.n_dx, dtype=np.int64)
    dx_supports = _component_supports(spec.n_dx, spec.true_rank)
    for r, support in enumerate(dx_supports):
        dx_component[support] = r

    def comorbid_dx(i, j):
        if spec.comorbid_dx_prob <= 0.0 or rng.random() >= spec.comorbid_dx_prob:
            return None
        active = np.flatnonzero(u_patient[i] > 0)
        others = active[active != dx_component[j]]
        if len(others):
            support = dx_supports[int(others[int(rng.integers(len(others)))])]
            extra = int(support[int(rng.integers(len(support)))])
        else:
            extra = int(rng.integers(spec.n_dx))
        return None if extra == j else extra

    with open(paths["encounters"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "encounter_id", "date", "kind", "code"])
        enc_seq = 0
        for (i, j, k), count in zip(coords, values):
            for _ in range(int(count)):
                enc_seq += 1
                date = diagnosis_dates[i] + dt.timedelta(days=int(rng.integers(0, _WINDOW_DAYS + 1)))
                enc_id = f"e{enc_seq:08d}"
                writer.writerow([patient_ids[i], enc_id, date.isoformat(), "DX", dx_codes[j]])
                extra = comorbid_dx(i, j)
                if extra is not None:
                    writer.writerow([patient_ids[i], enc_id, date.isoformat(), "DX", dx_codes[extra]])
                writer.writerow([patient_ids[i], enc_id, date.isoformat(), "MED", med_names[k]])

    with open(paths["demographics"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(_DEMOGRAPHICS_HEADER))
        for i, pid in enumerate(patient_ids):
            writer.writerow(
                [
                    pid,
                    diagnosis_dates[i].isoformat(),
                    death_dates[i].isoformat() if death_dates[i] else "",
                    f"{age[i]:g}",
                    "male" if is_male[i] else "female",
                    "african american" if is_aa[i] else "white",
                    "married" if is_married[i] else "single",
                    "medicare" if is_medicaid_medicare[i] else "private",
                    zip_codes[patient_zip[i]],
                ]
            )

    with open(paths["income"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["zip", "median_income"])
        for z_idx, zip_code in enumerate(zip_codes):
            writer.writerow([zip_code, f"{zip_income[z_idx]:g}"])

    with open(paths["indications"], "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["diagnosis_code", "medication"])
        for d, m in sorted(indicated):
            writer.writerow([dx_codes[d], med_names[m]])

    truth = {
        "spec": {
            "n_patients": spec.n_patients,
            "n_dx": spec.n_dx,
            "n_med": spec.n_med,
            "true_rank": spec.true_rank,
            "noise": spec.noise,
            "lambda_scale": spec.lambda_scale,
            "membership_prob": spec.membership_prob,
            "label_intercept": spec.label_intercept,
            "seed": spec.seed,
        },
        "lambda": lam.tolist(),
        "factors": {
            "patient": u_patient.tolist(),
            "diagnosis": u_dx.tolist(),
            "medication": u_med.tolist(),
        },
        "label_model": {
            "intercept": spec.label_intercept,
            "pheno_effects": pheno_effects.tolist(),
            "covariate_effects": covariate_effects.tolist(),
            "covariate_names": list(COVARIATE_NAMES),
            "age_standardization": [65.0, 10.0],
            "income_standardization": [55000.0, 18000.0],
        },
        "labels": {patient_ids[i]: int(labels[i]) for i in range(spec.n_patients)},
        "ids": {"patients": patient_ids, "diagnoses": dx_codes, "medications": med_names},
    }
    with open(paths["truth"], "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True)
        fh.write("\n")

    log.info(
        "simulated cohort: %d patients, %d nonzero cells, %d deaths",
        spec.n_patients,
        len(values),
        int(labels.sum()),
    )
    return SimulatedCohort(
        spec=spec,
        paths=paths,
        patient_ids=patient_ids,
        dx_codes=dx_codes,
        med_names=med_names,
        lam=lam,
        u_patient=u_patient,
        u_dx=u_dx,
        u_med=u_med,
        labels=labels,
        covariates=covariates,
        coords=coords,
        values=values,
        indication_pairs={(dx_codes[d], med_names[m]) for d, m in indicated},
    )


_DEMOGRAPHICS_HEADER = (
    "patient_id",
    "diagnosis_date",
    "death_date",
    "age",
    "sex",
    "race",
    "marital_status",
    "insurance",
    "zip",
)
