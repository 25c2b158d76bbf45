"""Cohort ingestion: raw encounter, demographics, and income files to a clean table.

The raw inputs are comma-separated files (see the README for the exact
schemas) plus optional medication-name mapping and code list files. Every
operation here is a pure transformation: it takes a table and returns a new
one, so tables can be processed concurrently without shared state.

Conventions baked into this module:
  * a year is exactly 365 days for all window and horizon arithmetic;
  * missing categorical demographics count as the 0 level of their indicator;
  * missing zip-level income is imputed with the cohort median income;
  * medication mapping rules apply first-match-wins in file order.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import logging
import re
import statistics
from dataclasses import dataclass, field, replace

from .errors import InputError

log = logging.getLogger(__name__)

DAYS_PER_YEAR = 365

ENCOUNTER_COLUMNS = ("patient_id", "encounter_id", "date", "kind", "code")
DEMOGRAPHICS_COLUMNS = (
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
INCOME_COLUMNS = ("zip", "median_income")

COVARIATE_NAMES = (
    "is_male",
    "is_african_american",
    "is_married",
    "is_medicaid_medicare",
    "age_at_diagnosis",
    "median_household_income",
)

_MALE_VALUES = {"m", "male"}
_AFRICAN_AMERICAN_VALUES = {
    "african american",
    "african-american",
    "african_american",
    "black",
    "black or african american",
}
_MARRIED_VALUES = {"married"}
_MEDICAID_MEDICARE_TOKENS = ("medicaid", "medicare")


@dataclass(frozen=True)
class EncounterRecord:
    """One clinical encounter with its recorded diagnoses and medications."""

    patient_id: str
    encounter_id: str
    date: dt.date
    diagnoses: tuple[str, ...]
    medications: tuple[str, ...]


@dataclass(frozen=True)
class PatientDemographics:
    patient_id: str
    diagnosis_date: dt.date
    death_date: dt.date | None
    age_at_diagnosis: float
    sex: str
    race: str
    marital_status: str
    insurance: str
    zip_code: str


@dataclass(frozen=True)
class CovariateVector:
    """The six fixed covariates entering supervision and the final model."""

    is_male: int
    is_african_american: int
    is_married: int
    is_medicaid_medicare: int
    age_at_diagnosis: float
    median_household_income: float

    def as_tuple(self) -> tuple[float, ...]:
        return (
            float(self.is_male),
            float(self.is_african_american),
            float(self.is_married),
            float(self.is_medicaid_medicare),
            float(self.age_at_diagnosis),
            float(self.median_household_income),
        )


@dataclass
class CohortTable:
    """Normalized long-format encounters plus per-patient demographics.

    ``labels`` is empty until :func:`assign_outcomes` has run. ``notes`` is a
    processing log (imputation counts, rejected rows, window used) carried
    along for reports; it is not part of the analytic content.
    """

    encounters: list[EncounterRecord]
    demographics: dict[str, PatientDemographics]
    covariates: dict[str, CovariateVector]
    labels: dict[str, int] = field(default_factory=dict)
    notes: list[str] = field(default_factory=list)

    @property
    def patient_ids(self) -> list[str]:
        return sorted(self.demographics)

    def content_equal(self, other: "CohortTable") -> bool:
        """Equality of analytic content, ignoring the processing notes."""
        return (
            self.encounters == other.encounters
            and self.demographics == other.demographics
            and self.covariates == other.covariates
            and self.labels == other.labels
        )


@dataclass(frozen=True)
class MedicationRule:
    pattern: str
    generics: tuple[str, ...]
    regex: re.Pattern

    def matches(self, name: str) -> bool:
        return self.regex.fullmatch(name) is not None


def _parse_date(text: str) -> dt.date:
    return dt.date.fromisoformat(text.strip())


def _require_columns(found, required, path) -> None:
    missing = [c for c in required if c not in (found or [])]
    if missing:
        raise InputError(f"{path}: missing mandatory column(s) {', '.join(missing)}")


def _open_csv(path):
    try:
        return open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc


def _summarize_rejects(rejects: list[tuple[int, str]], path: str, notes: list[str]) -> None:
    if not rejects:
        return
    lines = ", ".join(str(n) for n, _ in rejects[:20])
    suffix = ", ..." if len(rejects) > 20 else ""
    notes.append(f"{path}: rejected {len(rejects)} row(s) with unparseable fields (lines {lines}{suffix})")
    for line_no, reason in rejects:
        log.warning("%s line %d rejected: %s", path, line_no, reason)


def _build_covariates(
    demographics: dict[str, PatientDemographics],
    income_by_zip: dict[str, float],
    notes: list[str],
) -> dict[str, CovariateVector]:
    known = {
        pid: income_by_zip[d.zip_code]
        for pid, d in demographics.items()
        if d.zip_code in income_by_zip
    }
    fallback = statistics.median(known.values()) if known else 0.0
    n_imputed = len(demographics) - len(known)
    if n_imputed:
        notes.append(
            f"income: imputed cohort median ({fallback:g}) for {n_imputed} patient(s) with no zip match"
        )

    covariates = {}
    for pid, d in demographics.items():
        insurance = d.insurance.casefold()
        covariates[pid] = CovariateVector(
            is_male=int(d.sex.casefold() in _MALE_VALUES),
            is_african_american=int(d.race.casefold() in _AFRICAN_AMERICAN_VALUES),
            is_married=int(d.marital_status.casefold() in _MARRIED_VALUES),
            is_medicaid_medicare=int(any(tok in insurance for tok in _MEDICAID_MEDICARE_TOKENS)),
            age_at_diagnosis=d.age_at_diagnosis,
            median_household_income=known.get(pid, fallback),
        )
    return covariates


def load_tables(encounter_path, demographics_path, income_path) -> CohortTable:
    """Load and join the three raw files into an unlabeled cohort table.

    Rows with unparseable mandatory fields are rejected and reported by line
    number. Hard errors (missing file or column, duplicate patient, encounter
    referencing an unknown patient) raise :class:`InputError`.
    """
    notes: list[str] = []

    demographics: dict[str, PatientDemographics] = {}
    rejects: list[tuple[int, str]] = []
    with _open_csv(demographics_path) as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, DEMOGRAPHICS_COLUMNS, demographics_path)
        for line_no, row in enumerate(reader, start=2):
            pid = (row.get("patient_id") or "").strip()
            try:
                if not pid:
                    raise ValueError("empty patient_id")
                diagnosis_date = _parse_date(row["diagnosis_date"])
                death_raw = (row.get("death_date") or "").strip()
                death_date = _parse_date(death_raw) if death_raw else None
                age = float(row["age"])
                if age < 0:
                    raise ValueError("negative age")
                if death_date is not None and death_date < diagnosis_date:
                    raise ValueError("death_date before diagnosis_date")
            except (ValueError, KeyError) as exc:
                rejects.append((line_no, str(exc)))
                continue
            if pid in demographics:
                raise InputError(
                    f"{demographics_path} line {line_no}: duplicate patient_id {pid!r}"
                )
            demographics[pid] = PatientDemographics(
                patient_id=pid,
                diagnosis_date=diagnosis_date,
                death_date=death_date,
                age_at_diagnosis=age,
                sex=(row.get("sex") or "").strip(),
                race=(row.get("race") or "").strip(),
                marital_status=(row.get("marital_status") or "").strip(),
                insurance=(row.get("insurance") or "").strip(),
                zip_code=(row.get("zip") or "").strip(),
            )
    _summarize_rejects(rejects, str(demographics_path), notes)

    income_by_zip: dict[str, float] = {}
    rejects = []
    with _open_csv(income_path) as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, INCOME_COLUMNS, income_path)
        for line_no, row in enumerate(reader, start=2):
            zip_code = (row.get("zip") or "").strip()
            try:
                if not zip_code:
                    raise ValueError("empty zip")
                income = float(row["median_income"])
            except (ValueError, KeyError) as exc:
                rejects.append((line_no, str(exc)))
                continue
            if zip_code in income_by_zip:
                notes.append(f"{income_path} line {line_no}: duplicate zip {zip_code!r}, keeping first")
                continue
            income_by_zip[zip_code] = income
    _summarize_rejects(rejects, str(income_path), notes)

    # Encounters arrive one code per row; group rows by encounter identifier.
    grouped: dict[str, dict] = {}
    rejects = []
    with _open_csv(encounter_path) as fh:
        reader = csv.DictReader(fh)
        _require_columns(reader.fieldnames, ENCOUNTER_COLUMNS, encounter_path)
        for line_no, row in enumerate(reader, start=2):
            pid = (row.get("patient_id") or "").strip()
            enc_id = (row.get("encounter_id") or "").strip()
            kind = (row.get("kind") or "").strip().upper()
            code = (row.get("code") or "").strip()
            try:
                if not pid or not enc_id:
                    raise ValueError("empty patient_id or encounter_id")
                if kind not in ("DX", "MED"):
                    raise ValueError(f"kind must be DX or MED, got {row.get('kind')!r}")
                if not code:
                    raise ValueError("empty code")
                date = _parse_date(row["date"])
            except (ValueError, KeyError) as exc:
                rejects.append((line_no, str(exc)))
                continue
            if pid not in demographics:
                raise InputError(
                    f"{encounter_path} line {line_no}: unknown patient_id {pid!r}"
                )
            slot = grouped.setdefault(
                enc_id, {"patient_id": pid, "date": date, "dx": [], "med": []}
            )
            if slot["patient_id"] != pid:
                raise InputError(
                    f"{encounter_path} line {line_no}: encounter {enc_id!r} spans two patients"
                )
            if slot["date"] != date:
                raise InputError(
                    f"{encounter_path} line {line_no}: encounter {enc_id!r} has conflicting dates"
                )
            slot["dx" if kind == "DX" else "med"].append(code)
    _summarize_rejects(rejects, str(encounter_path), notes)

    encounters = [
        EncounterRecord(
            patient_id=slot["patient_id"],
            encounter_id=enc_id,
            date=slot["date"],
            diagnoses=tuple(slot["dx"]),
            medications=tuple(slot["med"]),
        )
        for enc_id, slot in grouped.items()
    ]
    encounters.sort(key=lambda e: (e.patient_id, e.date, e.encounter_id))

    covariates = _build_covariates(demographics, income_by_zip, notes)
    notes.append(
        f"loaded {len(demographics)} patients, {len(encounters)} encounters, "
        f"{len(income_by_zip)} zip income rows"
    )
    return CohortTable(
        encounters=encounters,
        demographics=demographics,
        covariates=covariates,
        labels={},
        notes=notes,
    )


def load_medication_rules(mapping_path) -> list[MedicationRule]:
    """Parse a mapping file of ``pattern<TAB>generic[,generic...]`` lines.

    ``*`` is the only wildcard and matches any substring; matching is
    case-insensitive against the full medication string.
    """
    rules = []
    with _open_csv(mapping_path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            if "\t" not in line:
                raise InputError(
                    f"{mapping_path} line {line_no}: expected 'pattern<TAB>generic[,generic...]'"
                )
            pattern, _, rhs = line.partition("\t")
            pattern = pattern.strip()
            generics = tuple(g.strip() for g in rhs.split(","))
            if not pattern or not generics or any(not g for g in generics):
                raise InputError(f"{mapping_path} line {line_no}: malformed rule")
            regex = re.compile(
                ".*".join(re.escape(piece) for piece in pattern.split("*")),
                re.IGNORECASE,
            )
            rules.append(MedicationRule(pattern=pattern, generics=generics, regex=regex))
    return rules


def normalize_medication_names(table: CohortTable, mapping_path) -> CohortTable:
    """Map raw medication strings to generic names, first matching rule wins.

    Combination rules expand one raw name into several generic entries.
    Unmatched names pass through unchanged. Repeated generics within one
    encounter are deduplicated (counting is presence-per-encounter anyway).
    """
    rules = load_medication_rules(mapping_path)

    def map_name(name: str) -> tuple[str, ...]:
        for rule in rules:
            if rule.matches(name):
                return rule.generics
        return (name,)

    new_encounters = []
    for enc in table.encounters:
        seen: dict[str, None] = {}
        for name in enc.medications:
            for generic in map_name(name):
                seen.setdefault(generic)
        new_encounters.append(replace(enc, medications=tuple(seen)))
    return CohortTable(
        encounters=new_encounters,
        demographics=table.demographics,
        covariates=table.covariates,
        labels=dict(table.labels),
        notes=table.notes + [f"medication names normalized with {len(rules)} rule(s)"],
    )


def filter_by_prevalence(
    table: CohortTable,
    dx_min_frac: float = 0.01,
    med_min_frac: float = 0.005,
    forced_medications: frozenset | set = frozenset(),
    excluded_codes: frozenset | set = frozenset(),
) -> CohortTable:
    """Drop rare diagnoses/medications and anything on the exclusion list.

    Prevalence of a code is the fraction of distinct cohort patients with at
    least one occurrence; thresholds are inclusive (retain when >= threshold).
    Medications in ``forced_medications`` are retained regardless of
    prevalence; ``excluded_codes`` (matched against both diagnosis codes and
    medication names) are removed regardless of anything.
    """
    if not (0.0 < dx_min_frac <= 1.0) or not (0.0 < med_min_frac <= 1.0):
        raise InputError("prevalence fractions must lie in (0, 1]")
    n_patients = len(table.demographics)
    notes = list(table.notes)
    if n_patients == 0:
        notes.append("prevalence filter: empty cohort, nothing to do")
        return replace(table, labels=dict(table.labels), notes=notes)

    dx_patients: dict[str, set] = {}
    med_patients: dict[str, set] = {}
    for enc in table.encounters:
        for code in set(enc.diagnoses):
            dx_patients.setdefault(code, set()).add(enc.patient_id)
        for name in set(enc.medications):
            med_patients.setdefault(name, set()).add(enc.patient_id)

    forced = frozenset(forced_medications)
    excluded = frozenset(excluded_codes)
    keep_dx = {
        code
        for code, pids in dx_patients.items()
        if code not in excluded and len(pids) / n_patients >= dx_min_frac
    }
    keep_med = {
        name
        for name, pids in med_patients.items()
        if name not in excluded
        and (name in forced or len(pids) / n_patients >= med_min_frac)
    }

    new_encounters = [
        replace(
            enc,
            diagnoses=tuple(c for c in enc.diagnoses if c in keep_dx),
            medications=tuple(m for m in enc.medications if m in keep_med),
        )
        for enc in table.encounters
    ]
    n_dx_removed = len(dx_patients) - len(keep_dx)
    n_med_removed = len(med_patients) - len(keep_med)
    notes.append(
        f"prevalence filter: kept {len(keep_dx)}/{len(dx_patients)} diagnoses and "
        f"{len(keep_med)}/{len(med_patients)} medications "
        f"(removed {n_dx_removed} dx, {n_med_removed} med)"
    )
    if not keep_dx and not keep_med and (dx_patients or med_patients):
        notes.append("prevalence filter: result is empty")
    return CohortTable(
        encounters=new_encounters,
        demographics=table.demographics,
        covariates=table.covariates,
        labels=dict(table.labels),
        notes=notes,
    )


def assign_outcomes(
    table: CohortTable,
    horizon_years: float = 5,
    window_years: float = 1,
) -> CohortTable:
    """Label every patient and restrict encounters to the observation window.

    The label is 1 iff a death date exists within ``horizon_years`` of the
    diagnosis date (a year is 365 days, boundary inclusive). Encounters
    outside [diagnosis_date, diagnosis_date + window] are dropped;
    demographics, covariates, and labels are never touched by the window.
    """
    horizon_days = round(horizon_years * DAYS_PER_YEAR)
    window_days = round(window_years * DAYS_PER_YEAR)

    labels = {}
    for pid, d in table.demographics.items():
        if d.diagnosis_date is None:
            raise InputError(f"patient {pid!r} has no diagnosis date")
        dead = d.death_date is not None and (d.death_date - d.diagnosis_date).days <= horizon_days
        labels[pid] = int(dead)

    kept = []
    for enc in table.encounters:
        demo = table.demographics.get(enc.patient_id)
        if demo is None or demo.diagnosis_date is None:
            raise InputError(f"encounter {enc.encounter_id!r}: patient has no diagnosis date")
        offset = (enc.date - demo.diagnosis_date).days
        if 0 <= offset <= window_days:
            kept.append(enc)

    notes = table.notes + [
        f"outcomes: horizon {horizon_days} d, window {window_days} d "
        f"(1 year = {DAYS_PER_YEAR} d); {sum(labels.values())}/{len(labels)} deaths; "
        f"kept {len(kept)}/{len(table.encounters)} encounters in window"
    ]
    return CohortTable(
        encounters=kept,
        demographics=table.demographics,
        covariates=table.covariates,
        labels=labels,
        notes=notes,
    )


def load_code_set(path) -> frozenset:
    """Read a one-code-per-line file (blank lines and # comments ignored)."""
    codes = set()
    with _open_csv(path) as fh:
        for raw in fh:
            line = raw.strip()
            if line and not line.startswith("#"):
                codes.add(line)
    return frozenset(codes)


def save_cohort(table: CohortTable, path) -> None:
    """Serialize a cohort table to JSON (deterministic key order)."""
    payload = {
        "demographics": {
            pid: {
                "diagnosis_date": d.diagnosis_date.isoformat(),
                "death_date": d.death_date.isoformat() if d.death_date else None,
                "age_at_diagnosis": d.age_at_diagnosis,
                "sex": d.sex,
                "race": d.race,
                "marital_status": d.marital_status,
                "insurance": d.insurance,
                "zip_code": d.zip_code,
            }
            for pid, d in sorted(table.demographics.items())
        },
        "covariates": {
            pid: dict(zip(COVARIATE_NAMES, c.as_tuple()))
            for pid, c in sorted(table.covariates.items())
        },
        "labels": {pid: table.labels[pid] for pid in sorted(table.labels)},
        "encounters": [
            {
                "patient_id": e.patient_id,
                "encounter_id": e.encounter_id,
                "date": e.date.isoformat(),
                "diagnoses": list(e.diagnoses),
                "medications": list(e.medications),
            }
            for e in table.encounters
        ],
        "notes": list(table.notes),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_cohort(path) -> CohortTable:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid cohort JSON ({exc})") from exc

    demographics = {
        pid: PatientDemographics(
            patient_id=pid,
            diagnosis_date=_parse_date(d["diagnosis_date"]),
            death_date=_parse_date(d["death_date"]) if d.get("death_date") else None,
            age_at_diagnosis=float(d["age_at_diagnosis"]),
            sex=d.get("sex", ""),
            race=d.get("race", ""),
            marital_status=d.get("marital_status", ""),
            insurance=d.get("insurance", ""),
            zip_code=d.get("zip_code", ""),
        )
        for pid, d in payload["demographics"].items()
    }
    covariates = {
        pid: CovariateVector(
            is_male=int(c["is_male"]),
            is_african_american=int(c["is_african_american"]),
            is_married=int(c["is_married"]),
            is_medicaid_medicare=int(c["is_medicaid_medicare"]),
            age_at_diagnosis=float(c["age_at_diagnosis"]),
            median_household_income=float(c["median_household_income"]),
        )
        for pid, c in payload["covariates"].items()
    }
    encounters = [
        EncounterRecord(
            patient_id=e["patient_id"],
            encounter_id=e["encounter_id"],
            date=_parse_date(e["date"]),
            diagnoses=tuple(e["diagnoses"]),
            medications=tuple(e["medications"]),
        )
        for e in payload["encounters"]
    ]
    return CohortTable(
        encounters=encounters,
        demographics=demographics,
        covariates=covariates,
        labels={pid: int(v) for pid, v in payload.get("labels", {}).items()},
        notes=list(payload.get("notes", [])),
    )
