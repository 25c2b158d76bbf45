import datetime as dt

import numpy as np
import pytest

from phenotensor.cohort import (
    CohortTable,
    CovariateVector,
    EncounterRecord,
    PatientDemographics,
)
from phenotensor.tensor import tensor_from_entries


def make_demo(pid, diagnosis="2010-01-01", death=None, age=60.0, sex="female",
              race="white", marital="married", insurance="private", zip_code="60601"):
    return PatientDemographics(
        patient_id=pid,
        diagnosis_date=dt.date.fromisoformat(diagnosis),
        death_date=dt.date.fromisoformat(death) if death else None,
        age_at_diagnosis=age,
        sex=sex,
        race=race,
        marital_status=marital,
        insurance=insurance,
        zip_code=zip_code,
    )


def make_cov(pid=None, **kwargs):
    defaults = dict(is_male=0, is_african_american=0, is_married=1,
                    is_medicaid_medicare=0, age_at_diagnosis=60.0,
                    median_household_income=50000.0)
    defaults.update(kwargs)
    return CovariateVector(**defaults)


def make_encounter(pid, enc_id, date, dx=(), med=()):
    return EncounterRecord(
        patient_id=pid,
        encounter_id=enc_id,
        date=dt.date.fromisoformat(date),
        diagnoses=tuple(dx),
        medications=tuple(med),
    )


def make_table(encounters, patient_ids, labels=None, diagnosis="2010-01-01"):
    demographics = {pid: make_demo(pid, diagnosis=diagnosis) for pid in patient_ids}
    covariates = {pid: make_cov() for pid in patient_ids}
    return CohortTable(
        encounters=list(encounters),
        demographics=demographics,
        covariates=covariates,
        labels=dict(labels or {}),
    )


def random_small_tensor(rng, max_dim=4, max_count=5, density=0.5):
    dims = tuple(int(rng.integers(1, max_dim + 1)) for _ in range(3))
    entries = {}
    for i in range(dims[0]):
        for j in range(dims[1]):
            for k in range(dims[2]):
                if rng.random() < density:
                    entries[(i, j, k)] = int(rng.integers(1, max_count + 1))
    labels = tuple(tuple(f"{axis}{x}" for x in range(dims[a])) for a, axis in enumerate("pdm"))
    return tensor_from_entries(dims, labels, entries)


def random_model(rng, dims, rank):
    from phenotensor.cp import CPModel

    return CPModel(
        lam=rng.random(rank) + 0.25,
        u_patient=rng.random((dims[0], rank)),
        u_dx=rng.random((dims[1], rank)),
        u_med=rng.random((dims[2], rank)),
    )


def dense_reconstruction(model):
    return np.einsum("ir,jr,kr,r->ijk", model.u_patient, model.u_dx, model.u_med, model.lam)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
