"""Supervised non-negative CP factorization by block projected gradient.

The objective is the squared reconstruction error plus an omega-weighted
logistic negative log-likelihood over patient memberships (and optional
fixed covariates). Each outer iteration refits the logistic coefficients,
then takes one projected-gradient step per mode (patient, diagnosis,
medication) with backtracking, then renormalizes the columns.

Monotonicity is enforced by construction: the logistic refit is accepted
only if it does not increase its term, every mode step is accepted only if
it does not increase the combined objective, and normalization rescales the
phenotype coefficients so the combined objective is invariant under it.
The backtracking step starts at ``backtrack_init`` times the inverse of a
Lipschitz bound on the mode subproblem, which keeps the iterate sequence
invariant under rescaling of the counts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .cp import CPModel, _mttkrp_core, normalize_columns
from .errors import InputError, NumericalError
from .logit import fit_logistic, sigmoid
from .tensor import SparseTensor3

log = logging.getLogger(__name__)

DEFAULT_RANK = 50


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of one factorization run."""

    rank: int = DEFAULT_RANK
    omega: float = 0.0
    max_outer_iters: int = 500
    rel_tol: float = 1e-4
    seed: int = 0
    backtrack_shrink: float = 0.5
    backtrack_init: float = 1.0
    backtrack_max: int = 30

    def validate(self) -> None:
        if self.rank < 1:
            raise InputError("rank must be >= 1")
        if self.omega < 0:
            raise InputError("omega must be >= 0")
        if self.max_outer_iters < 0:
            raise InputError("max_outer_iters must be >= 0")
        if self.rel_tol <= 0:
            raise InputError("rel_tol must be > 0")
        if self.seed < 0:
            raise InputError("seed must be non-negative")
        if not (0.0 < self.backtrack_shrink < 1.0):
            raise InputError("backtrack_shrink must lie in (0, 1)")
        if self.backtrack_init <= 0:
            raise InputError("backtrack_init must be > 0")
        if self.backtrack_max < 0:
            raise InputError("backtrack_max must be >= 0")

    _FILE_KEYS = (
        "rank",
        "omega",
        "max_outer_iters",
        "rel_tol",
        "seed",
        "backtrack_shrink",
        "backtrack_init",
        "backtrack_max",
    )

    @classmethod
    def from_file(cls, path) -> "SolverConfig":
        """Parse a plain-text ``key = value`` file (# comments allowed)."""
        values = {}
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
                if key not in cls._FILE_KEYS:
                    raise InputError(f"{path} line {line_no}: unknown key {key!r}")
                values[key] = value
        kwargs = {}
        try:
            for key in ("rank", "max_outer_iters", "seed", "backtrack_max"):
                if key in values:
                    kwargs[key] = int(values[key])
            for key in ("omega", "rel_tol", "backtrack_shrink", "backtrack_init"):
                if key in values:
                    kwargs[key] = float(values[key])
        except ValueError as exc:
            raise InputError(f"{path}: {exc}") from exc
        config = cls(**kwargs)
        config.validate()
        return config

    def to_file(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in self._FILE_KEYS:
                fh.write(f"{key} = {getattr(self, key)}\n")


@dataclass
class Supervision:
    """Outcome labels (possibly a training subset), covariates, coefficients.

    ``labels`` maps patient index (tensor axis position) to 0/1.
    ``covariates`` is an (n_patients, n_cov) matrix aligned to the patient
    axis, or None. ``beta`` is the current coefficient vector laid out as
    (intercept, rank phenotype terms, covariate terms); None means zeros.
    """

    labels: dict[int, int]
    covariates: np.ndarray | None = None
    beta: np.ndarray | None = None


@dataclass
class FitTrace:
    """Per-outer-iteration log of one factorize run."""

    iterations: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    frobenius: list[float] = field(default_factory=list)
    logistic_nll: list[float] = field(default_factory=list)
    step_patient: list[float] = field(default_factory=list)
    step_dx: list[float] = field(default_factory=list)
    step_med: list[float] = field(default_factory=list)
    beta_loglik: list[float] = field(default_factory=list)
    min_factor: list[float] = field(default_factory=list)
    converged: bool = False
    final_beta: np.ndarray | None = None

    def n_iterations(self) -> int:
        return len(self.iterations)

    def save_csv(self, path) -> None:
        columns = (
            "iteration",
            "objective",
            "frobenius",
            "logistic_nll",
            "step_patient",
            "step_dx",
            "step_med",
            "beta_loglik",
            "min_factor",
        )
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(columns) + "\n")
            for row in zip(
                self.iterations,
                self.objective,
                self.frobenius,
                self.logistic_nll,
                self.step_patient,
                self.step_dx,
                self.step_med,
                self.beta_loglik,
                self.min_factor,
            ):
                fh.write(str(row[0]) + "," + ",".join(format(x, ".17g") for x in row[1:]) + "\n")


def init_factors(dims, rank: int, seed: int) -> CPModel:
    """Seeded uniform (0,1) factors with unit weights, then normalized."""
    if rank < 1:
        raise InputError("rank must be >= 1")
    rng = np.random.default_rng(seed)
    u_patient = rng.random((dims[0], rank))
    u_dx = rng.random((dims[1], rank))
    u_med = rng.random((dims[2], rank))
    return normalize_columns(
        CPModel(lam=np.ones(rank), u_patient=u_patient, u_dx=u_dx, u_med=u_med)
    )


def _sup_arrays(m: CPModel, sup: Supervision):
    """Sorted labeled indices, their labels, and the covariate matrix."""
    labeled = np.array(sorted(int(i) for i in sup.labels), dtype=np.int64)
    if labeled.size == 0:
        raise InputError("supervision has no labels")
    n_patients = m.u_patient.shape[0]
    if labeled.min() < 0 or labeled.max() >= n_patients:
        raise InputError("labels refer to patients outside the tensor")
    y = np.array([sup.labels[int(i)] for i in labeled], dtype=float)
    cov = None
    if sup.covariates is not None:
        cov = np.asarray(sup.covariates, dtype=float)
        if cov.ndim != 2 or cov.shape[0] != n_patients:
            raise InputError("covariates must be (n_patients, n_cov)")
    return labeled, y, cov


def _beta_or_zeros(sup: Supervision, rank: int, n_cov: int) -> np.ndarray:
    if sup.beta is None:
        return np.zeros(1 + rank + n_cov)
    beta = np.asarray(sup.beta, dtype=float).ravel()
    if beta.shape[0] != 1 + rank + n_cov:
        raise InputError(
            f"beta has length {beta.shape[0]}, expected {1 + rank + n_cov}"
        )
    if not np.isfinite(beta).all():
        raise NumericalError("beta contains non-finite values")
    return beta


def _logistic_nll(u_patient, labeled, y, cov, beta, rank) -> float:
    z = beta[0] + u_patient[labeled] @ beta[1 : 1 + rank]
    if cov is not None:
        z = z + cov[labeled] @ beta[1 + rank :]
    return float(np.sum(np.logaddexp(0.0, z) - y * z))


def combined_objective(
    m: CPModel,
    t: SparseTensor3,
    sup: Supervision | None = None,
    omega: float = 0.0,
) -> float:
    """Frobenius fit plus omega times the logistic NLL at the current beta."""
    from .cp import frobenius_fit

    f = frobenius_fit(m, t)
    if omega == 0.0 or sup is None or not sup.labels:
        return f
    labeled, y, cov = _sup_arrays(m, sup)
    n_cov = cov.shape[1] if cov is not None else 0
    beta = _beta_or_zeros(sup, m.rank, n_cov)
    return f + omega * _logistic_nll(m.u_patient, labeled, y, cov, beta, m.rank)


def patient_mode_gradient(
    m: CPModel,
    t: SparseTensor3,
    sup: Supervision | None = None,
    omega: float = 0.0,
) -> np.ndarray:
    """Gradient of the combined objective with respect to the patient factors.

    The reconstruction part is 2 (U Gamma - MTTKRP diag(lam)) with Gamma the
    weight-scaled Hadamard product of the other modes' Gram matrices; the
    supervised part adds omega * (sigmoid(z_p) - y_p) * beta_pheno rows for
    labeled patients.
    """
    from .cp import mttkrp

    if m.dims != t.dims:
        raise ValueError(f"model dims {m.dims} do not match tensor dims {t.dims}")
    lam = m.lam
    gamma = (lam[:, None] * lam[None, :]) * (m.u_dx.T @ m.u_dx) * (m.u_med.T @ m.u_med)
    grad = 2.0 * (m.u_patient @ gamma - mttkrp(t, m, 1) * lam[None, :])
    if omega > 0.0 and sup is not None and sup.labels:
        labeled, y, cov = _sup_arrays(m, sup)
        n_cov = cov.shape[1] if cov is not None else 0
        beta = _beta_or_zeros(sup, m.rank, n_cov)
        z = beta[0] + m.u_patient[labeled] @ beta[1 : 1 + m.rank]
        if cov is not None:
            z = z + cov[labeled] @ beta[1 + m.rank :]
        resid = sigmoid(z) - y
        grad[labeled] += omega * resid[:, None] * beta[1 : 1 + m.rank][None, :]
    return grad


def other_mode_gradient(m: CPModel, t: SparseTensor3, mode: int) -> np.ndarray:
    """Reconstruction-only gradient for the diagnosis (2) or medication (3) mode."""
    from .cp import mttkrp

    if mode not in (2, 3):
        raise ValueError("mode must be 2 or 3")
    if m.dims != t.dims:
        raise ValueError(f"model dims {m.dims} do not match tensor dims {t.dims}")
    lam = m.lam
    if mode == 2:
        gamma = (lam[:, None] * lam[None, :]) * (m.u_patient.T @ m.u_patient) * (m.u_med.T @ m.u_med)
        return 2.0 * (m.u_dx @ gamma - mttkrp(t, m, 2) * lam[None, :])
    gamma = (lam[:, None] * lam[None, :]) * (m.u_patient.T @ m.u_patient) * (m.u_dx.T @ m.u_dx)
    return 2.0 * (m.u_med @ gamma - mttkrp(t, m, 3) * lam[None, :])


def refit_beta(m: CPModel, sup: Supervision) -> np.ndarray:
    """Maximum-likelihood logistic coefficients on memberships and covariates.

    Warm-started from ``sup.beta``; the fitter's safeguarded Newton steps
    never increase the negative log-likelihood relative to the warm start.
    """
    labeled, y, cov = _sup_arrays(m, sup)
    X = m.u_patient[labeled]
    if cov is not None:
        X = np.hstack([X, cov[labeled]])
    n_cov = cov.shape[1] if cov is not None else 0
    beta0 = None
    if sup.beta is not None:
        beta0 = _beta_or_zeros(sup, m.rank, n_cov)
    glm = fit_logistic(X, y, beta0=beta0)
    return glm.coefficients


def factorize(
    t: SparseTensor3,
    config: SolverConfig,
    sup: Supervision | None = None,
) -> tuple[CPModel, FitTrace]:
    """Fit a non-negative CP model, optionally guided by outcome labels.

    Returns the normalized, importance-sorted model and the full iteration
    trace. The run stops when the relative combined-objective change drops
    below ``config.rel_tol`` or after ``config.max_outer_iters`` iterations.
    """
    config.validate()
    if t.nnz == 0:
        raise InputError("cannot factorize an empty tensor")

    R = config.rank
    omega = config.omega
    init = init_factors(t.dims, R, config.seed)
    U = [init.u_patient.copy(), init.u_dx.copy(), init.u_med.copy()]
    lam = init.lam.astype(float).copy()

    supervised = omega > 0.0 and sup is not None and len(sup.labels) > 0
    labeled = y_lab = cov = cov_labeled = None
    beta = None
    if supervised:
        labeled, y_lab, cov = _sup_arrays(init, sup)
        cov_labeled = cov[labeled] if cov is not None else None
        n_cov = cov.shape[1] if cov is not None else 0
        beta = _beta_or_zeros(sup, R, n_cov)

    ii, jj, kk = t.coords[:, 0], t.coords[:, 1], t.coords[:, 2]
    vals = t.values.astype(float)
    x_sq = float(vals @ vals)

    def grams():
        return [Um.T @ Um for Um in U]

    def nll_at(u_patient) -> float:
        return _logistic_nll(u_patient, labeled, y_lab, cov, beta, R)

    def mode1_mttkrp():
        return _mttkrp_core(ii, jj, kk, vals, t.dims[0], U[1], U[2])

    G = grams()
    MT1 = mode1_mttkrp()
    F = (
        x_sq
        - 2.0 * float(np.einsum("ir,ir,r->", MT1, U[0], lam))
        + float(lam @ ((G[0] * G[1] * G[2]) @ lam))
    )
    nll = nll_at(U[0]) if supervised else 0.0

    trace = FitTrace()
    mttkrp_args = (
        (ii, jj, kk, 1, 2),  # patient mode: rows ii, factors dx & med
        (jj, ii, kk, 0, 2),
        (kk, ii, jj, 0, 1),
    )
    prev_obj = None
    for it in range(1, config.max_outer_iters + 1):
        # scalar importance calibration: best multiple of the current model
        G = grams()
        MT1 = mode1_mttkrp()
        msq = float(lam @ ((G[0] * G[1] * G[2]) @ lam))
        inner = float(np.einsum("ir,ir,r->", MT1, U[0], lam))
        if msq > 0.0:
            s = max(inner / msq, 0.0)
            f_new = x_sq - 2.0 * s * inner + s * s * msq
            if np.isfinite(f_new) and f_new <= F:
                lam = lam * s
                F = f_new

        beta_ll = float("nan")
        if supervised:
            X_design = U[0][labeled] if cov is None else np.hstack([U[0][labeled], cov_labeled])
            glm = fit_logistic(X_design, y_lab, beta0=beta)
            old_beta = beta
            beta = glm.coefficients
            nll_new = nll_at(U[0])
            if nll_new <= nll:
                nll = nll_new
            else:  # float-path guard; refit cannot truly increase the NLL
                beta = old_beta
            beta_ll = -nll

        steps = [0.0, 0.0, 0.0]
        dead = (U[0].max(axis=0) == 0) | (U[1].max(axis=0) == 0) | (U[2].max(axis=0) == 0)
        for mode in range(3):
            out_idx, a_idx, b_idx, a_mode, b_mode = mttkrp_args[mode]
            # the patient-mode MTTKRP from the calibration step is still
            # current (neither lambda rescaling nor the beta refit touch it)
            MT = MT1 if mode == 0 else _mttkrp_core(
                out_idx, a_idx, b_idx, vals, t.dims[mode], U[a_mode], U[b_mode]
            )
            G_a = U[a_mode].T @ U[a_mode]
            G_b = U[b_mode].T @ U[b_mode]
            gamma = (lam[:, None] * lam[None, :]) * G_a * G_b
            grad = 2.0 * (U[mode] @ gamma - MT * lam[None, :])
            lipschitz = 2.0 * float(np.linalg.norm(gamma, "fro"))
            if mode == 0 and supervised:
                b_ph = beta[1 : 1 + R]
                z = beta[0] + U[0][labeled] @ b_ph
                if cov is not None:
                    z = z + cov[labeled] @ beta[1 + R :]
                grad[labeled] += omega * (sigmoid(z) - y_lab)[:, None] * b_ph[None, :]
                lipschitz += 0.25 * omega * float(b_ph @ b_ph)
            grad[:, dead] = 0.0

            eta = config.backtrack_init / max(lipschitz, 1e-300)
            cur_obj = F + omega * nll
            for _ in range(config.backtrack_max + 1):
                cand = np.maximum(0.0, U[mode] - eta * grad)
                G_c = cand.T @ cand
                inner_c = float(np.einsum("ir,ir,r->", MT, cand, lam))
                f_c = x_sq - 2.0 * inner_c + float(lam @ ((G_a * G_b * G_c) @ lam))
                nll_c = nll_at(cand) if (mode == 0 and supervised) else nll
                obj_c = f_c + omega * nll_c
                if np.isfinite(obj_c) and obj_c <= cur_obj:
                    U[mode] = cand
                    F = f_c
                    nll = nll_c
                    steps[mode] = eta
                    break
                eta *= config.backtrack_shrink

        # renormalize; rescaling the phenotype coefficients keeps the
        # combined objective invariant under the column rescaling
        patient_maxima = U[0].max(axis=0)
        normalized = normalize_columns(
            CPModel(lam=lam, u_patient=U[0], u_dx=U[1], u_med=U[2])
        )
        U = [normalized.u_patient, normalized.u_dx, normalized.u_med]
        lam = normalized.lam
        if supervised:
            scale = np.where(patient_maxima > 0, patient_maxima, 1.0)
            beta = np.concatenate([beta[:1], beta[1 : 1 + R] * scale, beta[1 + R :]])

        obj = F + omega * nll
        trace.iterations.append(it)
        trace.objective.append(obj)
        trace.frobenius.append(F)
        trace.logistic_nll.append(nll)
        trace.step_patient.append(steps[0])
        trace.step_dx.append(steps[1])
        trace.step_med.append(steps[2])
        trace.beta_loglik.append(beta_ll)
        trace.min_factor.append(float(min(Um.min() for Um in U)))

        if not np.isfinite(obj):
            err = NumericalError(f"non-finite objective at iteration {it}")
            err.trace = trace
            raise err
        if prev_obj is not None and (prev_obj - obj) < config.rel_tol * max(prev_obj, 1e-300):
            trace.converged = True
            break
        prev_obj = obj

    order = np.argsort(-lam, kind="stable")
    model = CPModel(
        lam=lam[order].copy(),
        u_patient=U[0][:, order].copy(),
        u_dx=U[1][:, order].copy(),
        u_med=U[2][:, order].copy(),
        labels=t.labels,
    )
    if supervised:
        trace.final_beta = np.concatenate([beta[:1], beta[1 : 1 + R][order], beta[1 + R :]])
    log.info(
        "factorize: rank %d, omega %g, %d iteration(s), converged=%s",
        R,
        omega,
        trace.n_iterations(),
        trace.converged,
    )
    return model, trace
