"""Sparse 3-way co-occurrence tensor construction from a cohort table.

The tensor axes are patient x diagnosis x medication; each entry counts
encounters in which the (diagnosis, medication) pair appeared together for
that patient. Two counting rules are supported: equal correspondence (every
medication pairs with every diagnosis of the same encounter) and indication
filtering (only pairs present in a curated indication map contribute).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .cohort import CohortTable
from .errors import InputError

log = logging.getLogger(__name__)

EQUAL_CORRESPONDENCE = "equal"
INDICATION_FILTERED = "indicated"

_TENSOR_MAGIC = "# phenotensor sparse count tensor v1"


@dataclass(frozen=True)
class SparseTensor3:
    """Coordinate-format 3-way count tensor with axis labels.

    ``coords`` is an (nnz, 3) int array of unique (i, j, k) triples sorted
    lexicographically, ``values`` the matching positive counts. ``labels``
    holds one name tuple per axis (patients, diagnoses, medications).
    """

    dims: tuple[int, int, int]
    labels: tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]]
    coords: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def validate(self) -> None:
        if self.coords.shape != (self.nnz, 3):
            raise InputError("coords must be an (nnz, 3) array")
        for axis in range(3):
            if len(self.labels[axis]) != self.dims[axis]:
                raise InputError(f"axis {axis}: {len(self.labels[axis])} labels for dim {self.dims[axis]}")
        if self.nnz:
            if self.values.min() <= 0:
                raise InputError("all counts must be positive")
            if self.coords.min() < 0 or (self.coords >= np.array(self.dims)).any():
                raise InputError("coordinate out of range")
            if len(np.unique(np.ravel_multi_index(self.coords.T, self.dims))) != self.nnz:
                raise InputError("duplicate coordinates")

    def entries(self) -> dict[tuple[int, int, int], int]:
        return {
            (int(i), int(j), int(k)): int(v)
            for (i, j, k), v in zip(self.coords, self.values)
        }

    def to_dense(self, max_cells: int = 2_000_000) -> np.ndarray:
        n_cells = int(np.prod(self.dims)) if all(self.dims) else 0
        if n_cells > max_cells:
            raise InputError(f"refusing to densify {n_cells} cells")
        dense = np.zeros(self.dims)
        if self.nnz:
            dense[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.values
        return dense


def tensor_from_entries(dims, labels, entries: dict) -> SparseTensor3:
    """Build a canonical (sorted, validated) tensor from an entry dict."""
    items = sorted((tuple(int(x) for x in key), int(v)) for key, v in entries.items() if v)
    coords = np.array([key for key, _ in items], dtype=np.int64).reshape(len(items), 3)
    values = np.array([v for _, v in items], dtype=np.int64)
    t = SparseTensor3(
        dims=tuple(int(d) for d in dims),
        labels=tuple(tuple(names) for names in labels),
        coords=coords,
        values=values,
    )
    t.validate()
    return t


def count_cooccurrences(
    table: CohortTable,
    mode: str = EQUAL_CORRESPONDENCE,
    indications: "IndicationMap | None" = None,
) -> SparseTensor3:
    """Count per-encounter (diagnosis, medication) co-occurrences.

    Entry (p, d, m) is the number of encounters of patient p containing both
    d and m. Under ``indicated`` mode, pairs absent from the indication map
    contribute nothing. Axis labels are sorted lexicographically; the patient
    axis covers every cohort patient, so empty patients keep a (zero) row
    until :func:`drop_empty_patients`.
    """
    if mode not in (EQUAL_CORRESPONDENCE, INDICATION_FILTERED):
        raise InputError(f"unknown correspondence mode {mode!r}")
    if mode == INDICATION_FILTERED and indications is None:
        raise InputError("indication-filtered counting requires an indication map")

    patients = sorted(table.demographics)
    dx_codes = sorted({c for enc in table.encounters for c in enc.diagnoses})
    med_names = sorted({m for enc in table.encounters for m in enc.medications})
    p_index = {p: i for i, p in enumerate(patients)}
    d_index = {d: j for j, d in enumerate(dx_codes)}
    m_index = {m: k for k, m in enumerate(med_names)}

    counts: dict[tuple[int, int, int], int] = {}
    for enc in table.encounters:
        i = p_index[enc.patient_id]
        for d in set(enc.diagnoses):
            for m in set(enc.medications):
                if mode == INDICATION_FILTERED and not indications.allows(d, m):
                    continue
                key = (i, d_index[d], m_index[m])
                counts[key] = counts.get(key, 0) + 1

    return tensor_from_entries(
        dims=(len(patients), len(dx_codes), len(med_names)),
        labels=(tuple(patients), tuple(dx_codes), tuple(med_names)),
        entries=counts,
    )


@dataclass(frozen=True)
class IndicationMap:
    """Set of permitted (diagnosis code, generic medication name) pairs."""

    pairs: frozenset

    def allows(self, dx_code: str, medication: str) -> bool:
        return (dx_code, medication) in self.pairs

    def __len__(self) -> int:
        return len(self.pairs)

    @classmethod
    def from_files(cls, path, extra_path=None) -> "IndicationMap":
        """Load a `diagnosis_code,medication` CSV, optionally merged with a
        second file of user-added pairs."""
        import csv

        pairs = set()
        for p in [path] + ([extra_path] if extra_path else []):
            try:
                fh = open(p, newline="", encoding="utf-8")
            except OSError as exc:
                raise InputError(f"cannot open {p}: {exc}") from exc
            with fh:
                reader = csv.DictReader(fh)
                missing = [c for c in ("diagnosis_code", "medication") if c not in (reader.fieldnames or [])]
                if missing:
                    raise InputError(f"{p}: missing column(s) {', '.join(missing)}")
                for row in reader:
                    d = (row.get("diagnosis_code") or "").strip()
                    m = (row.get("medication") or "").strip()
                    if d and m:
                        pairs.add((d, m))
        return cls(pairs=frozenset(pairs))


def nearest_rank_cap(values: np.ndarray, percentile: float) -> int:
    """Nearest-rank percentile: the value at position ceil(q * n) of the
    ascending sort (1-based), computed over the nonzero counts only."""
    if not (0.0 < percentile <= 1.0):
        raise InputError("percentile must lie in (0, 1]")
    n = len(values)
    if n == 0:
        raise InputError("cannot take a percentile of an empty tensor")
    position = int(np.ceil(percentile * n))
    position = min(max(position, 1), n)
    return int(np.sort(values, kind="stable")[position - 1])


def truncate_counts(t: SparseTensor3, percentile: float = 0.99) -> SparseTensor3:
    """Cap every count at the nearest-rank percentile of the nonzero counts."""
    if t.nnz == 0:
        raise InputError("cannot truncate an empty tensor")
    cap = nearest_rank_cap(t.values, percentile)
    return replace(t, values=np.minimum(t.values, cap))


def drop_empty_patients(t: SparseTensor3, table: CohortTable) -> tuple[SparseTensor3, CohortTable]:
    """Remove patients with no nonzero entries from tensor and table alike.

    Patient indices are compacted, preserving the original (sorted) order;
    the removal count is appended to the table notes.
    """
    occupied = np.zeros(t.dims[0], dtype=bool)
    if t.nnz:
        occupied[t.coords[:, 0]] = True
    kept = np.flatnonzero(occupied)
    removed = t.dims[0] - len(kept)
    if removed == 0:
        return t, table

    remap = -np.ones(t.dims[0], dtype=np.int64)
    remap[kept] = np.arange(len(kept))
    new_coords = t.coords.copy()
    if t.nnz:
        new_coords[:, 0] = remap[t.coords[:, 0]]
    kept_names = tuple(t.labels[0][i] for i in kept)
    new_tensor = SparseTensor3(
        dims=(len(kept), t.dims[1], t.dims[2]),
        labels=(kept_names, t.labels[1], t.labels[2]),
        coords=new_coords,
        values=t.values.copy(),
    )
    new_tensor.validate()

    kept_set = set(kept_names)
    note = f"dropped {removed} patient(s) with no co-occurrences"
    if not kept_set:
        note += " (tensor is now empty)"
        log.warning("drop_empty_patients: every patient was empty")
    new_table = CohortTable(
        encounters=[e for e in table.encounters if e.patient_id in kept_set],
        demographics={p: d for p, d in table.demographics.items() if p in kept_set},
        covariates={p: c for p, c in table.covariates.items() if p in kept_set},
        labels={p: v for p, v in table.labels.items() if p in kept_set},
        notes=table.notes + [note],
    )
    log.info("%s", note)
    return new_tensor, new_table


@dataclass(frozen=True)
class TensorStats:
    """Aggregate tensor characteristics, computed over nonzero content.

    Axis counts are the numbers of distinct patients / diagnoses /
    medications that carry at least one nonzero entry, so an empty tensor
    reports all zeros. Deaths and mean age cover the patients with entries.
    """

    n_patients: int
    n_diagnoses: int
    n_medications: int
    n_dx_med_pairs: int
    median_cooccurrences_per_patient: float
    total_cooccurrences: int
    deaths_at_horizon: int
    mean_age: float

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_diagnoses": self.n_diagnoses,
            "n_medications": self.n_medications,
            "n_dx_med_pairs": self.n_dx_med_pairs,
            "median_cooccurrences_per_patient": self.median_cooccurrences_per_patient,
            "total_cooccurrences": self.total_cooccurrences,
            "deaths_at_horizon": self.deaths_at_horizon,
            "mean_age": self.mean_age,
        }


def tensor_stats(t: SparseTensor3, table: CohortTable) -> TensorStats:
    if t.nnz == 0:
        return TensorStats(0, 0, 0, 0, 0.0, 0, 0, 0.0)

    active_patients = np.unique(t.coords[:, 0])
    per_patient = np.bincount(t.coords[:, 0], weights=t.values, minlength=t.dims[0])
    pair_ids = np.unique(t.coords[:, 1] * t.dims[2] + t.coords[:, 2])

    names = [t.labels[0][i] for i in active_patients]
    deaths = sum(int(table.labels.get(name, 0)) for name in names)
    ages = [table.demographics[name].age_at_diagnosis for name in names if name in table.demographics]
    mean_age = float(np.mean(ages)) if ages else 0.0

    return TensorStats(
        n_patients=len(active_patients),
        n_diagnoses=len(np.unique(t.coords[:, 1])),
        n_medications=len(np.unique(t.coords[:, 2])),
        n_dx_med_pairs=len(pair_ids),
        median_cooccurrences_per_patient=float(np.median(per_patient[active_patients])),
        total_cooccurrences=int(t.values.sum()),
        deaths_at_horizon=deaths,
        mean_age=mean_age,
    )


def save_tensor(t: SparseTensor3, path) -> None:
    """Write the text format: three label tables, then `i j k count` lines."""
    axis_names = ("patients", "diagnoses", "medications")
    for names in t.labels:
        for name in names:
            if "\n" in name or "\r" in name:
                raise InputError(f"label {name!r} contains a newline")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_TENSOR_MAGIC + "\n")
        fh.write("dims {} {} {}\n".format(*t.dims))
        for axis, names in zip(axis_names, t.labels):
            fh.write(f"{axis} {len(names)}\n")
            for name in names:
                fh.write(name + "\n")
        fh.write(f"entries {t.nnz}\n")
        for (i, j, k), v in zip(t.coords, t.values):
            fh.write(f"{i} {j} {k} {v}\n")


def load_tensor(path) -> SparseTensor3:
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc

    def fail(msg):
        raise InputError(f"{path}: {msg}")

    if not lines or lines[0] != _TENSOR_MAGIC:
        fail("not a tensor file (bad header)")
    pos = 1
    try:
        tag, *dims_text = lines[pos].split()
        if tag != "dims":
            fail("expected dims line")
        dims = tuple(int(x) for x in dims_text)
        pos += 1
        labels = []
        for axis_name, dim in zip(("patients", "diagnoses", "medications"), dims):
            tag, count_text = lines[pos].split()
            if tag != axis_name or int(count_text) != dim:
                fail(f"expected '{axis_name} {dim}'")
            pos += 1
            labels.append(tuple(lines[pos : pos + dim]))
            pos += dim
        tag, nnz_text = lines[pos].split()
        if tag != "entries":
            fail("expected entries line")
        nnz = int(nnz_text)
        pos += 1
        entries = {}
        for line in lines[pos : pos + nnz]:
            i, j, k, v = (int(x) for x in line.split())
            entries[(i, j, k)] = v
        if len(entries) != nnz:
            fail("duplicate or missing entries")
    except (ValueError, IndexError) as exc:
        raise InputError(f"{path}: malformed tensor file ({exc})") from exc
    return tensor_from_entries(dims, labels, entries)
