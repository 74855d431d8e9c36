"""Mixed multinomial logit estimation by maximum simulated likelihood.

Utilities are ``U_itj = x_itj' alpha + z_itj' beta_i + eps_itj`` with
``beta_i ~ N(gamma, L L')``.  The integral over ``beta_i`` is replaced by a
weighted sum over standard-normal nodes ``x_q`` mapped to
``beta = gamma + L x_q``; nodes come from a shared
:class:`~dqmix.quadrature.QuadratureRule` or from per-individual QMC blocks.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.special

from .optimize import bfgs
from .qmc import DrawMatrix, normal_nodes
from .quadrature import QuadratureRule

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-300
_LOG_FLOOR = math.log(PROB_FLOOR)


class DatasetError(ValueError):
    """A choice dataset is malformed."""


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    """Balanced panel: ``X`` (N, T, J, p), ``Z`` (N, T, J, d), ``chosen`` (N, T)."""

    X: np.ndarray
    Z: np.ndarray
    chosen: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        Z = np.asarray(self.Z, dtype=float)
        chosen = np.asarray(self.chosen, dtype=np.int64)
        if X.ndim != 4 or Z.ndim != 4 or X.shape[:3] != Z.shape[:3]:
            raise DatasetError("X and Z must be (N, T, J, k) arrays with matching panel shape")
        if chosen.shape != X.shape[:2]:
            raise DatasetError("chosen must have shape (N, T)")
        if np.any(chosen < 0) or np.any(chosen >= X.shape[2]):
            raise DatasetError("chosen alternative index out of range")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Z))):
            raise DatasetError("covariates must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)
        object.__setattr__(self, "chosen", chosen)

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def T(self) -> int:
        return self.X.shape[1]

    @property
    def J(self) -> int:
        return self.X.shape[2]

    @property
    def n_fixed(self) -> int:
        return self.X.shape[3]

    @property
    def n_random(self) -> int:
        return self.Z.shape[3]

    def subset(self, idx) -> "ChoiceDataset":
        return ChoiceDataset(self.X[idx], self.Z[idx], self.chosen[idx])


@dataclass(frozen=True, eq=False)
class MmnlParams:
    """Fixed coefficients, random-coefficient means and the Cholesky factor ``L``."""

    alpha: np.ndarray
    gamma: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=float))
        gamma = np.atleast_1d(np.asarray(self.gamma, dtype=float))
        chol = np.tril(np.asarray(self.chol, dtype=float).reshape(gamma.size, gamma.size))
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "chol", chol)

    @property
    def covariance(self) -> np.ndarray:
        return self.chol @ self.chol.T

    @property
    def std_devs(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @classmethod
    def default_start(cls, p: int, d: int) -> "MmnlParams":
        return cls(np.zeros(p), np.zeros(d), 0.1 * np.eye(d))

    def to_vector(self, structure: str = "full") -> np.ndarray:
        return np.concatenate([self.alpha, self.gamma, self.chol[_chol_index(self.gamma.size, structure)]])

    @classmethod
    def from_vector(cls, theta, p: int, d: int, structure: str = "full") -> "MmnlParams":
        theta = np.asarray(theta, dtype=float)
        chol = np.zeros((d, d))
        chol[_chol_index(d, structure)] = theta[p + d:]
        return cls(theta[:p], theta[p:p + d], chol)


def _chol_index(d: int, structure: str):
    if structure == "full":
        return np.tril_indices(d)
    if structure == "diagonal":
        return np.diag_indices(d)
    raise ValueError(f"unknown covariance structure {structure!r}")


def parameter_names(p: int, d: int, structure: str = "full") -> list[str]:
    rows, cols = _chol_index(d, structure)
    return (
        [f"alpha_{k + 1}" for k in range(p)]
        + [f"gamma_{k + 1}" for k in range(d)]
        + [f"L{i + 1}{j + 1}" for i, j in zip(rows, cols)]
    )


# ---------------------------------------------------------------------------
# probabilities


def logit_prob(utilities) -> np.ndarray:
    """Softmax over the last axis, stabilized by subtracting the maximum."""
    u = np.asarray(utilities, dtype=float)
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def conditional_likelihood(data_i: ChoiceDataset, alpha, beta_i) -> float:
    """Product over choice situations of the chosen alternative's logit probability.

    ``data_i`` holds a single individual (``N == 1``).
    """
    v = data_i.X[0] @ np.atleast_1d(alpha) + data_i.Z[0] @ np.atleast_1d(beta_i)
    lp = v - scipy.special.logsumexp(v, axis=-1, keepdims=True)
    return float(np.exp(np.sum(lp[np.arange(data_i.T), data_i.chosen[0]])))


def _node_arrays(rule, N: int):
    """Nodes as (N or 1, R, d) and log-weights as (N or 1, R)."""
    if isinstance(rule, QuadratureRule):
        return rule.nodes.T[None], np.log(rule.weights)[None]
    if isinstance(rule, DrawMatrix):
        nodes = normal_nodes(rule)
        if nodes.shape[0] != N:
            raise ValueError(f"draws cover {nodes.shape[0]} individuals, data has {N}")
        return nodes, np.full(nodes.shape[:2], -math.log(rule.count))
    rules = list(rule)
    if len(rules) != N:
        raise ValueError(f"{len(rules)} per-individual rules for {N} individuals")
    return np.stack([r.nodes.T for r in rules]), np.stack([np.log(r.weights) for r in rules])


@dataclass
class _Evaluation:
    loglik: float
    log_probs: np.ndarray
    scores: np.ndarray | None
    clamped: int


def _evaluate(data: ChoiceDataset, params: MmnlParams, rule, structure="full", gradient=False) -> _Evaluation:
    nodes, logw = _node_arrays(rule, data.N)
    if nodes.shape[2] != data.n_random:
        raise ValueError(f"rule dimension {nodes.shape[2]} does not match {data.n_random} random coefficients")
    N, T, J, R = data.N, data.T, data.J, nodes.shape[1]
    d = data.n_random
    chunk = max(1, 2_000_000 // (T * J * R))
    log_probs = np.empty(N)
    rows, cols = _chol_index(d, structure)
    scores = np.empty((N, data.n_fixed + d + rows.size)) if gradient else None
    shared = nodes.shape[0] == 1
    t_idx = np.arange(T)[None, :]
    for start in range(0, N, chunk):
        sl = slice(start, min(N, start + chunk))
        c = sl.stop - sl.start
        nd = nodes if shared else nodes[sl]
        lw = logw if shared else logw[sl]
        X, Z, ch = data.X[sl], data.Z[sl], data.chosen[sl]
        Zf = Z.reshape(c, T * J, d)
        beta = params.gamma + nd @ params.chol.T  # (c|1, R, d)
        v = (X @ params.alpha)[..., None] + (Zf @ beta.transpose(0, 2, 1)).reshape(c, T, J, R)
        vmax = v.max(axis=2, keepdims=True)
        e = np.exp(v - vmax)
        denom = e.sum(axis=2)  # (c, T, R)
        lse = vmax[:, :, 0, :] + np.log(denom)
        n_idx = np.arange(c)[:, None]
        log_l = np.sum(v[n_idx, t_idx, ch] - lse, axis=1)  # (c, R)
        a = log_l + lw
        amax = a.max(axis=1, keepdims=True)
        lp = amax[:, 0] + np.log(np.exp(a - amax).sum(axis=1))
        log_probs[sl] = lp
        if gradient:
            h = np.exp(a - lp[:, None])  # posterior node weights
            Pf = (e / denom[:, :, None, :]).reshape(c, T * J, R)
            z_sum = Z[n_idx, t_idx, ch].sum(axis=1)  # (c, d)
            g_beta = z_sum[:, None, :] - Pf.transpose(0, 2, 1) @ Zf  # (c, R, d)
            pbar = Pf @ h[:, :, None]  # (c, TJ, 1)
            g_alpha = X[n_idx, t_idx, ch].sum(axis=1) - (pbar.transpose(0, 2, 1) @ X.reshape(c, T * J, -1))[:, 0]
            g_gamma = (h[:, None, :] @ g_beta)[:, 0]
            g_chol = ((h[:, :, None] * g_beta).transpose(0, 2, 1) @ nd)[:, rows, cols]
            scores[sl] = np.hstack([g_alpha, g_gamma, g_chol])
    low = log_probs < _LOG_FLOOR
    clamped = int(np.count_nonzero(low))
    if clamped:
        log.debug("clamped %d simulated probabilities at %g", clamped, PROB_FLOOR)
        log_probs = np.where(low, _LOG_FLOOR, log_probs)
        if scores is not None:
            scores[low] = 0.0  # the clamped objective is flat there
    return _Evaluation(float(math.fsum(log_probs)), log_probs, scores, clamped)


def simulated_loglik(data: ChoiceDataset, params: MmnlParams, rule, return_probs: bool = False):
    """``sum_i log(sum_q w_q L_i(alpha, gamma + L x_q))``.

    With ``return_probs=True`` the per-individual simulated probabilities are
    returned as well.
    """
    ev = _evaluate(data, params, rule)
    if return_probs:
        return ev.loglik, np.exp(ev.log_probs)
    return ev.loglik


def simulated_loglik_gradient(data: ChoiceDataset, params: MmnlParams, rule, structure: str = "full") -> np.ndarray:
    """Gradient with respect to ``(alpha, gamma, lower-triangle of L)``.

    For ``structure="diagonal"`` only the diagonal of ``L`` is included.
    """
    return _evaluate(data, params, rule, structure, gradient=True).scores.sum(axis=0)


def individual_scores(data, params, rule, structure="full") -> np.ndarray:
    """Per-individual gradients of ``log P_i``, shape ``(N, n_params)``."""
    return _evaluate(data, params, rule, structure, gradient=True).scores


# ---------------------------------------------------------------------------
# estimation


@dataclass
class EstimationResult:
    params: MmnlParams
    loglik: float
    gradient_norm: float
    loglik_evaluations: int
    wall_time: float
    converged: bool
    standard_errors: np.ndarray
    structure: str = "full"
    iterations: int = 0
    message: str = ""
    clamped: int = 0
    min_probability: float = float("nan")
    trace: list = field(default_factory=list)

    @property
    def names(self) -> list[str]:
        return parameter_names(self.params.alpha.size, self.params.gamma.size, self.structure)

    @property
    def estimates(self) -> np.ndarray:
        return self.params.to_vector(self.structure)

    @property
    def z_scores(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.estimates / self.standard_errors

    def report(self, timing: bool = False) -> str:
        out = io.StringIO()
        out.write("mixed logit estimation\n")
        out.write(f"loglik {self.loglik!r}\n")
        out.write(f"converged {str(self.converged).lower()} ({self.message})\n")
        out.write(f"iterations {self.iterations}\n")
        out.write(f"loglik_evaluations {self.loglik_evaluations}\n")
        out.write(f"gradient_inf_norm {self.gradient_norm:.6e}\n")
        out.write(f"clamped_probabilities {self.clamped}\n")
        if timing:
            out.write(f"wall_time_seconds {self.wall_time:.3f}\n")
        out.write(f"{'parameter':<12}{'estimate':>16}{'std.err':>14}{'z':>10}\n")
        for name, est, se, z in zip(self.names, self.estimates, self.standard_errors, self.z_scores):
            out.write(f"{name:<12}{est:>16.8f}{se:>14.6f}{z:>10.3f}\n")
        return out.getvalue()


def fit(
    data: ChoiceDataset,
    rule,
    start: MmnlParams | None = None,
    structure: str = "full",
    gtol: float = 1e-6,
    ftol: float = 1e-9,
    max_iter: int = 500,
) -> EstimationResult:
    """Maximize the simulated loglikelihood with BFGS.

    ``structure="diagonal"`` restricts ``L`` (hence the covariance) to be
    diagonal.  Standard errors use the BHHH outer product of individual scores.
    """
    p, d = data.n_fixed, data.n_random
    if start is None:
        start = MmnlParams.default_start(p, d)
    theta0 = start.to_vector(structure)
    if not np.all(np.isfinite(theta0)):
        raise ValueError("starting values must be finite")
    clamped = 0

    def objective(theta):
        nonlocal clamped
        ev = _evaluate(data, MmnlParams.from_vector(theta, p, d, structure), rule, structure, gradient=True)
        clamped += ev.clamped
        return -ev.loglik, -ev.scores.sum(axis=0)

    t0 = time.perf_counter()
    res = bfgs(objective, theta0, gtol=gtol, ftol=ftol, max_iter=max_iter)
    wall = time.perf_counter() - t0
    params = MmnlParams.from_vector(res.x, p, d, structure)
    final = _evaluate(data, params, rule, structure, gradient=True)
    se = _bhhh_standard_errors(final.scores)
    if not res.converged:
        log.warning("estimation did not converge: %s", res.message)
    return EstimationResult(
        params=params,
        loglik=final.loglik,
        gradient_norm=float(np.max(np.abs(final.scores.sum(axis=0)))),
        loglik_evaluations=res.evaluations,
        wall_time=wall,
        converged=res.converged,
        standard_errors=se,
        structure=structure,
        iterations=res.iterations,
        message=res.message,
        clamped=clamped,
        min_probability=float(np.exp(final.log_probs.min())),
        trace=[-f for f in res.trace],
    )


def _bhhh_standard_errors(scores: np.ndarray) -> np.ndarray:
    info = scores.T @ scores
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(info)
    with np.errstate(invalid="ignore"):
        return np.sqrt(np.diag(cov))


# ---------------------------------------------------------------------------
# dataset files

_ID_COLUMNS = ("person_id", "task_id", "alt_id", "chosen")


def save_dataset(data: ChoiceDataset, path) -> Path:
    """Write the long-format file: one row per (person, task, alternative)."""
    path = Path(path)
    header = list(_ID_COLUMNS) + [f"x_{k + 1}" for k in range(data.n_fixed)] + [f"z_{k + 1}" for k in range(data.n_random)]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(data.N):
            for t in range(data.T):
                for j in range(data.J):
                    row = [i + 1, t + 1, j + 1, int(data.chosen[i, t] == j)]
                    row += [repr(float(v)) for v in data.X[i, t, j]]
                    row += [repr(float(v)) for v in data.Z[i, t, j]]
                    w.writerow(row)
    return path


def load_dataset(path) -> ChoiceDataset:
    """Read and validate a long-format choice file.

    Rows of one person must be contiguous; within a person, rows of one task
    must be contiguous.  Every task needs the same number of alternatives and
    exactly one chosen row; every person needs the same number of tasks.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        if tuple(header[:4]) != _ID_COLUMNS:
            raise DatasetError(f"{path}:1: header must start with {', '.join(_ID_COLUMNS)}")
        xcols = [h for h in header[4:] if h.startswith("x_")]
        zcols = [h for h in header[4:] if h.startswith("z_")]
        if header[4:] != xcols + zcols or xcols != [f"x_{k + 1}" for k in range(len(xcols))] \
                or zcols != [f"z_{k + 1}" for k in range(len(zcols))]:
            raise DatasetError(f"{path}:1: covariate columns must be x_1..x_p followed by z_1..z_d")
        width = len(header)
        people: dict = {}
        order = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} fields, got {len(row)}")
            try:
                pid, tid, aid = (int(v) for v in row[:3])
                chosen = int(row[3])
                values = [float(v) for v in row[4:]]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: non-numeric value") from None
            if chosen not in (0, 1):
                raise DatasetError(f"{path}:{lineno}: chosen must be 0 or 1")
            if not all(math.isfinite(v) for v in values):
                raise DatasetError(f"{path}:{lineno}: non-finite covariate")
            if pid not in people:
                people[pid] = {}
                order.append(pid)
            elif order[-1] != pid:
                raise DatasetError(f"{path}:{lineno}: rows of person {pid} are not contiguous")
            tasks = people[pid]
            if tid in tasks and list(tasks)[-1] != tid:
                raise DatasetError(f"{path}:{lineno}: rows of task {tid} (person {pid}) are not contiguous")
            tasks.setdefault(tid, []).append((lineno, aid, chosen, values))
    if not order:
        raise DatasetError(f"{path}: no data rows")
    T = len(people[order[0]])
    J = len(next(iter(people[order[0]].values())))
    p = len(xcols)
    N = len(order)
    X = np.empty((N, T, J, p))
    Z = np.empty((N, T, J, len(zcols)))
    ch = np.empty((N, T), dtype=np.int64)
    for i, pid in enumerate(order):
        tasks = people[pid]
        if len(tasks) != T:
            raise DatasetError(f"{path}: person {pid} has {len(tasks)} tasks, expected {T} (ragged panel)")
        for t, (tid, rows) in enumerate(tasks.items()):
            if len(rows) != J:
                raise DatasetError(
                    f"{path}:{rows[0][0]}: person {pid} task {tid} has {len(rows)} alternatives, expected {J}"
                )
            picks = [k for k, r in enumerate(rows) if r[2] == 1]
            if len(picks) != 1:
                raise DatasetError(
                    f"{path}:{rows[0][0]}: person {pid} task {tid} has {len(picks)} chosen alternatives, expected 1"
                )
            ch[i, t] = picks[0]
            vals = np.array([r[3] for r in rows])
            X[i, t] = vals[:, :p]
            Z[i, t] = vals[:, p:]
    return ChoiceDataset(X, Z, ch)
