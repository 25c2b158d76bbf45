"""CP decomposition model and its exact kernels.

A model is a set of R rank-1 components: a non-negative importance weight
per component plus one column in each of three non-negative factor
matrices (patient, diagnosis, medication memberships). Membership columns
are max-normalized so every value lies in [0, 1] with an attainable 1; the
removed scale is absorbed into the importance weights. The squared
reconstruction error is evaluated over the full tensor (zeros included)
without ever densifying.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .tensor import SparseTensor3

log = logging.getLogger(__name__)

MEMBERSHIP_NORM_NOTE = "memberships max-normalized per column (l-infinity), values in [0, 1]"


@dataclass(frozen=True)
class CPModel:
    """Importance weights plus three non-negative factor matrices.

    ``labels``, when present, carries the tensor's (patient, diagnosis,
    medication) name tables for export. Models are treated as immutable:
    every transformation returns a new instance.
    """

    lam: np.ndarray
    u_patient: np.ndarray
    u_dx: np.ndarray
    u_med: np.ndarray
    labels: tuple[tuple[str, ...], tuple[str, ...], tuple[str, ...]] | None = None

    @property
    def rank(self) -> int:
        return int(self.lam.shape[0])

    @property
    def dims(self) -> tuple[int, int, int]:
        return (self.u_patient.shape[0], self.u_dx.shape[0], self.u_med.shape[0])

    def factor(self, mode: int) -> np.ndarray:
        return (self.u_patient, self.u_dx, self.u_med)[mode - 1]

    def validate(self) -> None:
        R = self.rank
        for U in (self.u_patient, self.u_dx, self.u_med):
            if U.ndim != 2 or U.shape[1] != R:
                raise InputError("factor matrices must have one column per component")
            if not np.isfinite(U).all() or (U < 0).any():
                raise InputError("factor entries must be finite and non-negative")
        if not np.isfinite(self.lam).all() or (self.lam < 0).any():
            raise InputError("importance weights must be finite and non-negative")


def _check_dims(m: CPModel, t: SparseTensor3) -> None:
    if m.dims != t.dims:
        raise ValueError(f"model dims {m.dims} do not match tensor dims {t.dims}")


def reconstruct_entry(m: CPModel, i: int, j: int, k: int) -> float:
    """Model value at cell (i, j, k): sum_r lam_r * Up[i,r] * Ud[j,r] * Um[k,r]."""
    n1, n2, n3 = m.dims
    if not (0 <= i < n1 and 0 <= j < n2 and 0 <= k < n3):
        raise IndexError(f"cell ({i}, {j}, {k}) outside dims {m.dims}")
    return float(np.sum(m.lam * m.u_patient[i] * m.u_dx[j] * m.u_med[k]))


def _reconstruct_at(m: CPModel, coords: np.ndarray) -> np.ndarray:
    if coords.shape[0] == 0:
        return np.zeros(0)
    return (m.u_patient[coords[:, 0]] * m.u_dx[coords[:, 1]] * m.u_med[coords[:, 2]]) @ m.lam


def model_sq_norm(m: CPModel) -> float:
    """||M||_F^2 via the component Gram matrices (no densification)."""
    G = (m.lam[:, None] * m.lam[None, :])
    G = G * (m.u_patient.T @ m.u_patient)
    G = G * (m.u_dx.T @ m.u_dx)
    G = G * (m.u_med.T @ m.u_med)
    return float(G.sum())


def frobenius_fit(m: CPModel, t: SparseTensor3) -> float:
    """Squared reconstruction error over all cells, zeros included.

    Computed as ||X||^2 - 2<X, M> + ||M||^2 where the inner product runs
    over the nonzeros only.
    """
    _check_dims(m, t)
    vals = t.values.astype(float)
    x_sq = float(vals @ vals)
    inner = float(vals @ _reconstruct_at(m, t.coords))
    return x_sq - 2.0 * inner + model_sq_norm(m)


def _mttkrp_core(out_idx, a_idx, b_idx, vals, n_out, Ua, Ub) -> np.ndarray:
    """Accumulate sum_nnz x * Ua[a,r] * Ub[b,r] into rows given by out_idx.

    One flat bincount over (row, component) cells; deterministic order."""
    R = Ua.shape[1]
    if len(out_idx) == 0:
        return np.zeros((n_out, R))
    W = vals[:, None] * Ua[a_idx] * Ub[b_idx]
    flat = np.bincount(
        (out_idx[:, None] * R + np.arange(R)).ravel(),
        weights=W.ravel(),
        minlength=n_out * R,
    )
    return flat.reshape(n_out, R)


def mttkrp(t: SparseTensor3, m: CPModel, mode: int) -> np.ndarray:
    """Matricized-tensor times Khatri-Rao product of the two other factors.

    Row i, column r of the mode-1 result is
    sum_{(i,j,k) in nnz} x_ijk * Ud[j,r] * Um[k,r]; modes 2 and 3 permute
    the roles accordingly. Importance weights are not applied here.
    """
    _check_dims(m, t)
    if mode not in (1, 2, 3):
        raise ValueError("mode must be 1, 2, or 3")
    ii, jj, kk = t.coords[:, 0], t.coords[:, 1], t.coords[:, 2]
    vals = t.values.astype(float)
    if mode == 1:
        return _mttkrp_core(ii, jj, kk, vals, t.dims[0], m.u_dx, m.u_med)
    if mode == 2:
        return _mttkrp_core(jj, ii, kk, vals, t.dims[1], m.u_patient, m.u_med)
    return _mttkrp_core(kk, ii, jj, vals, t.dims[2], m.u_patient, m.u_dx)


def normalize_columns(m: CPModel) -> CPModel:
    """Divide each nonzero factor column by its maximum, absorbing the scale.

    The importance weight of each component is multiplied by the product of
    the three removed maxima; a component with an all-zero column in any
    mode is dead: its weight is set to 0 and zero columns stay zero. The
    reconstruction is unchanged at every cell.
    """
    factors = [m.u_patient.copy(), m.u_dx.copy(), m.u_med.copy()]
    lam = m.lam.copy().astype(float)
    maxima = np.stack([U.max(axis=0) if U.shape[0] else np.zeros(m.rank) for U in factors])
    for r in range(m.rank):
        for axis in range(3):
            if maxima[axis, r] > 0:
                factors[axis][:, r] /= maxima[axis, r]
                lam[r] *= maxima[axis, r]
        if (maxima[:, r] == 0).any():
            lam[r] = 0.0
    return CPModel(
        lam=lam,
        u_patient=factors[0],
        u_dx=factors[1],
        u_med=factors[2],
        labels=m.labels,
    )


def sort_by_importance(m: CPModel) -> CPModel:
    """Permute components so importance weights are descending (stable)."""
    order = np.argsort(-m.lam, kind="stable")
    return CPModel(
        lam=m.lam[order].copy(),
        u_patient=m.u_patient[:, order].copy(),
        u_dx=m.u_dx[:, order].copy(),
        u_med=m.u_med[:, order].copy(),
        labels=m.labels,
    )


@dataclass(frozen=True)
class Phenotype:
    """One component as a weighted set of diagnoses and medications.

    ``index`` is the 1-based rank position in the importance-sorted model.
    Memberships are (name, value) pairs with value > 0, descending by value.
    """

    index: int
    importance: float
    diagnoses: tuple[tuple[str, float], ...]
    medications: tuple[tuple[str, float], ...]


@dataclass(frozen=True)
class PhenotypeLengthReport:
    """Mean counts of members per live phenotype, at >0 and >threshold."""

    threshold: float
    mean_diagnoses_gt0: float
    mean_medications_gt0: float
    mean_diagnoses_gt_threshold: float
    mean_medications_gt_threshold: float
    n_components: int
    n_dead: int

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "mean_diagnoses_gt0": self.mean_diagnoses_gt0,
            "mean_medications_gt0": self.mean_medications_gt0,
            "mean_diagnoses_gt_threshold": self.mean_diagnoses_gt_threshold,
            "mean_medications_gt_threshold": self.mean_medications_gt_threshold,
            "n_components": self.n_components,
            "n_dead": self.n_dead,
        }


def _members(names, column) -> tuple[tuple[str, float], ...]:
    pairs = [(names[i], float(v)) for i, v in enumerate(column) if v > 0]
    pairs.sort(key=lambda item: (-item[1], item[0]))
    return tuple(pairs)


def export_phenotypes(
    m: CPModel,
    labels=None,
    display_threshold: float = 0.1,
) -> tuple[list[Phenotype], PhenotypeLengthReport]:
    """List every component's members and summarize phenotype lengths.

    Expects a normalized, importance-sorted model. Dead components (weight
    0) yield empty phenotypes and are excluded from the length averages.
    """
    if labels is None:
        if m.labels is None:
            raise InputError("model has no labels; pass (dx_names, med_names)")
        dx_names, med_names = m.labels[1], m.labels[2]
    else:
        dx_names, med_names = labels
    if len(dx_names) != m.u_dx.shape[0] or len(med_names) != m.u_med.shape[0]:
        raise InputError("label tables do not match factor dimensions")

    phenotypes = []
    dx_gt0, med_gt0, dx_gt_thr, med_gt_thr = [], [], [], []
    for r in range(m.rank):
        dead = m.lam[r] == 0
        dx_members = () if dead else _members(dx_names, m.u_dx[:, r])
        med_members = () if dead else _members(med_names, m.u_med[:, r])
        phenotypes.append(
            Phenotype(
                index=r + 1,
                importance=float(m.lam[r]),
                diagnoses=dx_members,
                medications=med_members,
            )
        )
        if not dead:
            dx_gt0.append(len(dx_members))
            med_gt0.append(len(med_members))
            dx_gt_thr.append(sum(1 for _, v in dx_members if v > display_threshold))
            med_gt_thr.append(sum(1 for _, v in med_members if v > display_threshold))

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    report = PhenotypeLengthReport(
        threshold=display_threshold,
        mean_diagnoses_gt0=mean(dx_gt0),
        mean_medications_gt0=mean(med_gt0),
        mean_diagnoses_gt_threshold=mean(dx_gt_thr),
        mean_medications_gt_threshold=mean(med_gt_thr),
        n_components=m.rank,
        n_dead=int(np.sum(m.lam == 0)),
    )
    return phenotypes, report


def phenotype_report_text(
    phenotypes: list[Phenotype],
    report: PhenotypeLengthReport,
    header_notes: tuple[str, ...] = (),
) -> str:
    """Human-readable phenotype listing, ranked by importance."""
    lines = ["phenotype report"]
    lines.append(MEMBERSHIP_NORM_NOTE)
    lines.extend(header_notes)
    lines.append(
        "mean members per live phenotype: "
        f"dx>0 {report.mean_diagnoses_gt0:.2f}, med>0 {report.mean_medications_gt0:.2f}, "
        f"dx>{report.threshold:g} {report.mean_diagnoses_gt_threshold:.2f}, "
        f"med>{report.threshold:g} {report.mean_medications_gt_threshold:.2f} "
        f"({report.n_components} components, {report.n_dead} dead)"
    )
    lines.append("")
    for ph in phenotypes:
        lines.append(f"phenotype {ph.index} (importance {ph.importance:.6g})")
        if not ph.diagnoses and not ph.medications:
            lines.append("  (dead component)")
            continue
        lines.append("  diagnoses:   " + ", ".join(f"{n} ({v:.3f})" for n, v in ph.diagnoses))
        lines.append("  medications: " + ", ".join(f"{n} ({v:.3f})" for n, v in ph.medications))
    return "\n".join(lines) + "\n"


def phenotype_report_dict(phenotypes: list[Phenotype], report: PhenotypeLengthReport) -> dict:
    """Machine-readable twin of the text report."""
    return {
        "normalization": MEMBERSHIP_NORM_NOTE,
        "lengths": report.to_dict(),
        "phenotypes": [
            {
                "index": ph.index,
                "importance": ph.importance,
                "diagnoses": [[n, v] for n, v in ph.diagnoses],
                "medications": [[n, v] for n, v in ph.medications],
            }
            for ph in phenotypes
        ],
    }


def save_model(m: CPModel, path) -> None:
    payload = {
        "rank": m.rank,
        "lambda": m.lam.tolist(),
        "factors": {
            "patient": m.u_patient.tolist(),
            "diagnosis": m.u_dx.tolist(),
            "medication": m.u_med.tolist(),
        },
        "labels": None
        if m.labels is None
        else {
            "patients": list(m.labels[0]),
            "diagnoses": list(m.labels[1]),
            "medications": list(m.labels[2]),
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True)
        fh.write("\n")


def load_model(path) -> CPModel:
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot open {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: not valid model JSON ({exc})") from exc
    labels = payload.get("labels")
    model = CPModel(
        lam=np.asarray(payload["lambda"], dtype=float),
        u_patient=np.asarray(payload["factors"]["patient"], dtype=float).reshape(-1, payload["rank"]),
        u_dx=np.asarray(payload["factors"]["diagnosis"], dtype=float).reshape(-1, payload["rank"]),
        u_med=np.asarray(payload["factors"]["medication"], dtype=float).reshape(-1, payload["rank"]),
        labels=None
        if labels is None
        else (tuple(labels["patients"]), tuple(labels["diagnoses"]), tuple(labels["medications"])),
    )
    model.validate()
    return model
