"""Designed quadrature: moment-matching rules with positive weights.

A rule ``(X, w)`` is designed for a multi-index set ``Lambda`` by driving the
moment residual ``||V(X) w - e_1||_2`` to a tolerance, where
``V[k, q] = pi_{alpha(k)}(x_q)``.  Positivity is built in through
``w_q = s_q**2`` and, for the uniform family, node containment through a
logistic map, so the problem becomes an unconstrained nonlinear least-squares
problem solved with Levenberg-Marquardt.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.linalg
import scipy.special

from .multiindex import DEFAULT_CAP, MultiIndexSet, total_order_set
from .orthopoly import WeightFamily, eval_table
from .quadrature import Provenance, QuadratureRule

log = logging.getLogger(__name__)

DEFAULT_EPS = 1e-8
DEFAULT_RESTARTS = 20
MAX_ITER = 2000
STEP_TOL = 1e-14
PRUNE_TOL = 1e-14
LOAD_RESIDUAL_TOL = 1e-12
CACHE_ENV = "DQMIX_RULE_CACHE"


class InfeasibleRuleError(RuntimeError):
    """No rule reached the residual target within the restart budget."""

    def __init__(self, message, *, best_residual, restarts, family, dim, order, n):
        super().__init__(message)
        self.best_residual = best_residual
        self.restarts = restarts
        self.family = family
        self.dim = dim
        self.order = order
        self.n = n

    def report(self) -> dict:
        return {
            "status": "infeasible",
            "family": self.family.value,
            "dim": self.dim,
            "order": self.order,
            "nodes": self.n,
            "best_residual": self.best_residual,
            "restarts": self.restarts,
        }


class RuleFileError(ValueError):
    """A rule file is malformed or violates a rule invariant."""


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Moment conditions ``V(X) w = e_1 / pi_0`` over an index set."""

    index_set: MultiIndexSet
    family: WeightFamily = WeightFamily.StandardNormal

    @classmethod
    def total_order(cls, family, d: int, r: int, cap: int = DEFAULT_CAP) -> "MomentSystem":
        return cls(total_order_set(d, r, cap=cap), WeightFamily.parse(family))

    @property
    def size(self) -> int:
        return len(self.index_set)

    @property
    def target(self) -> np.ndarray:
        # pi_0 == 1 for probability weights
        t = np.zeros(self.size)
        t[0] = 1.0
        return t


def _gathered(sys: MomentSystem, X: np.ndarray, rows=None, derivative=False):
    """Univariate factors ``G[k, j, q] = p_{alpha(k)_j}(x_jq)`` (and derivatives)."""
    A = sys.index_set.indices if rows is None else sys.index_set.indices[rows]
    d = A.shape[1]
    X = np.asarray(X, dtype=float).reshape(d, -1)
    tables = eval_table(sys.family, max(sys.index_set.max_degree, 0), X, derivative=derivative)
    cols = np.arange(d)[None, :]
    if derivative:
        p, dp = tables
        # tables are (degree, d, n); move degree next to dimension for the gather
        return p.transpose(1, 0, 2)[cols, A], dp.transpose(1, 0, 2)[cols, A]
    return tables.transpose(1, 0, 2)[cols, A]


def vandermonde(sys: MomentSystem, X) -> np.ndarray:
    """M x n matrix of multivariate orthonormal polynomials at the columns of ``X``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.shape[0] != sys.index_set.dim:
        raise ValueError(f"nodes have dimension {X.shape[0]}, index set has {sys.index_set.dim}")
    return _gathered(sys, X).prod(axis=1)


def moment_errors(sys: MomentSystem, X, w) -> np.ndarray:
    """``V(X) w - e_1``, accumulated over node chunks to bound memory."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    w = np.asarray(w, dtype=float)
    if X.shape[1] != w.shape[0]:
        raise ValueError("node and weight counts differ")
    acc = np.zeros(sys.size)
    chunk = max(1, 4_000_000 // (sys.size * sys.index_set.dim))
    for start in range(0, w.shape[0], chunk):
        acc += vandermonde(sys, X[:, start:start + chunk]) @ w[start:start + chunk]
    return acc - sys.target


def residual(sys: MomentSystem, X, w) -> float:
    """Euclidean norm of the moment errors."""
    return float(np.linalg.norm(moment_errors(sys, X, w)))


# ---------------------------------------------------------------------------
# parameterization


def _center(family: WeightFamily) -> float:
    return 0.0 if family is WeightFamily.StandardNormal else 0.5


class _Layout:
    """Maps unconstrained parameters to ``(X, w)`` and back-propagates Jacobians.

    Parameters are node coordinates (identity map for the normal family,
    logistic map onto (0, 1) for the uniform family) followed by square-root
    weights.  In symmetric mode, nodes come in pairs reflected through the
    centre of the support with a shared weight, plus a centre node when ``n``
    is odd; every odd-degree moment then vanishes identically.
    """

    def __init__(self, family: WeightFamily, d: int, n: int, symmetric: bool):
        self.family, self.d, self.n, self.symmetric = family, d, n, symmetric
        self.free = n // 2 if symmetric else n
        self.has_center = symmetric and n % 2 == 1
        self.n_params = self.free * (d + 1) + int(self.has_center)

    def split(self, theta):
        k = self.free * self.d
        Y = theta[:k].reshape(self.d, self.free)
        s = theta[k:k + self.free]
        s0 = theta[-1] if self.has_center else None
        return Y, s, s0

    def join(self, Y, s, s0=None):
        parts = [np.ravel(Y), np.ravel(s)]
        if self.has_center:
            parts.append([s0])
        return np.concatenate(parts)

    def _coords(self, Y):
        if self.family is WeightFamily.UniformUnit:
            x = scipy.special.expit(Y)
            return x, x * (1.0 - x)
        return Y, np.ones_like(Y)

    def expand(self, theta):
        """Full ``(X, w, dx/dy)`` for a parameter vector."""
        Y, s, s0 = self.split(theta)
        x, dxdy = self._coords(Y)
        if not self.symmetric:
            return x, s**2, dxdy
        c = _center(self.family)
        X = [x, 2.0 * c - x]
        w = [s**2, s**2]
        if self.has_center:
            X.append(np.full((self.d, 1), c))
            w.append([s0**2])
        return np.hstack(X), np.concatenate(w), dxdy

    def init(self, rng: np.random.Generator):
        if self.family is WeightFamily.StandardNormal:
            Y = rng.standard_normal((self.d, self.free))
        else:
            u = rng.uniform(size=(self.d, self.free))
            Y = scipy.special.logit(np.clip(u, 1e-6, 1 - 1e-6))
        s = np.full(self.free, math.sqrt(1.0 / self.n))
        return self.join(Y, s, math.sqrt(1.0 / self.n))

    def jacobian(self, dRdX, V, theta, dxdy):
        """Chain ``dR/dX`` (m, d, n_full) and ``dR/dw = V`` (m, n_full) to parameters."""
        Y, s, s0 = self.split(theta)
        h = self.free
        m = V.shape[0]
        if self.symmetric:
            jx = (dRdX[:, :, :h] - dRdX[:, :, h:2 * h]) * dxdy[None]
            js = 2.0 * s[None, :] * (V[:, :h] + V[:, h:2 * h])
        else:
            jx = dRdX * dxdy[None]
            js = 2.0 * s[None, :] * V
        cols = [jx.reshape(m, -1), js]
        if self.has_center:
            cols.append((2.0 * s0 * V[:, 2 * h])[:, None])
        return np.hstack(cols)


def _pick_layout(sys: MomentSystem, n: int, symmetric) -> _Layout:
    """Use the requested layout, or (``symmetric=None``) the one with more spare unknowns."""
    d = sys.index_set.dim
    if symmetric is not None:
        return _Layout(sys.family, d, n, bool(symmetric))
    even_rows = int(np.sum(sys.index_set.indices.sum(axis=1) % 2 == 0))
    sym = _Layout(sys.family, d, n, True)
    plain = _Layout(sys.family, d, n, False)
    return sym if sym.n_params - even_rows >= plain.n_params - sys.size else plain


class _Problem:
    """Residual and Jacobian of the moment system for one layout."""

    def __init__(self, sys: MomentSystem, layout: _Layout):
        self.sys, self.layout = sys, layout
        if layout.symmetric:
            # odd-degree rows vanish by construction
            self.rows = np.flatnonzero(sys.index_set.indices.sum(axis=1) % 2 == 0)
        else:
            self.rows = np.arange(sys.size)
        self.target = sys.target[self.rows]

    def residual(self, theta):
        X, w, _ = self.layout.expand(theta)
        V = _gathered(self.sys, X, self.rows).prod(axis=1)
        return V @ w - self.target

    def residual_and_jacobian(self, theta):
        X, w, dxdy = self.layout.expand(theta)
        G, dG = _gathered(self.sys, X, self.rows, derivative=True)
        m, d, n = G.shape
        # products over all dimensions except j, via prefix and suffix products
        pre = np.ones_like(G)
        suf = np.ones_like(G)
        if d > 1:
            pre[:, 1:] = np.cumprod(G[:, :-1], axis=1)
            suf[:, :-1] = np.cumprod(G[:, :0:-1], axis=1)[:, ::-1]
        V = pre[:, -1] * G[:, -1]
        dRdX = dG * pre * suf * w[None, None, :]
        return V @ w - self.target, self.layout.jacobian(dRdX, V, theta, dxdy)


@dataclass
class _Solve:
    theta: np.ndarray
    residual: float
    iterations: int
    reason: str


def levenberg_marquardt(problem: _Problem, theta, eps_target, max_iter=MAX_ITER, step_tol=STEP_TOL) -> _Solve:
    """Damped Gauss-Newton with Nielsen's damping update.

    The normal equations are solved in whichever of the parameter space or the
    residual space is smaller.
    """
    r, J = problem.residual_and_jacobian(theta)
    f = float(r @ r)
    if not np.isfinite(f):
        return _Solve(theta, math.inf, 0, "non-finite residual")
    lam = None
    nu = 2.0
    for it in range(1, max_iter + 1):
        if math.sqrt(f) <= eps_target:
            return _Solve(theta, math.sqrt(f), it - 1, "converged")
        m, p = J.shape
        g = J.T @ r
        primal = p <= m
        A = J.T @ J if primal else J @ J.T
        if lam is None:
            lam = 1e-3 * float(np.max(np.diag(A)))
        while True:
            try:
                factor = scipy.linalg.cho_factor(A + lam * np.eye(A.shape[0]), check_finite=False)
            except np.linalg.LinAlgError:
                lam *= nu
                nu *= 2.0
                continue
            if primal:
                delta = -scipy.linalg.cho_solve(factor, g, check_finite=False)
            else:
                delta = -(J.T @ scipy.linalg.cho_solve(factor, r, check_finite=False))
            step = float(np.linalg.norm(delta))
            if step < step_tol * (1.0 + float(np.linalg.norm(theta))):
                return _Solve(theta, math.sqrt(f), it, "step below tolerance")
            trial = theta + delta
            r_new = problem.residual(trial)
            f_new = float(r_new @ r_new)
            predicted = -float(delta @ g) * 2.0 - float(np.dot(J @ delta, J @ delta))
            if np.isfinite(f_new) and f_new < f:
                rho = (f - f_new) / predicted if predicted > 0 else 0.0
                lam *= max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3)
                nu = 2.0
                theta = trial
                r, J = problem.residual_and_jacobian(theta)
                f = float(r @ r)
                break
            lam *= nu
            nu *= 2.0
            if lam > 1e16:
                return _Solve(theta, math.sqrt(f), it, "damping overflow")
    return _Solve(theta, math.sqrt(f), max_iter, "iteration limit")


def _finalize(sys, layout, theta, seed, eps_target, restart):
    X, w, _ = layout.expand(theta)
    keep = w >= PRUNE_TOL
    if not np.all(keep):
        log.info("pruning %d zero-weight nodes", int((~keep).sum()))
        X, w = X[:, keep], w[keep]
    eps = residual(sys, X, w)
    if eps > eps_target or not np.all(w > 0) or not np.all(sys.family.contains(X)):
        return None
    d, r = sys.index_set.dim, sys.index_set.order
    return QuadratureRule(
        nodes=X,
        weights=w,
        family=sys.family,
        order=r,
        residual=eps,
        provenance=Provenance.DQ,
        seed=seed,
        meta={"restart": restart, "symmetric": layout.symmetric, "requested_nodes": layout.n},
    )


def generate_dq(
    family,
    d: int,
    r: int,
    n: int,
    eps_target: float = DEFAULT_EPS,
    seed: int = 0,
    max_restarts: int = DEFAULT_RESTARTS,
    symmetric: bool | None = None,
    max_iter: int = MAX_ITER,
    cap: int = DEFAULT_CAP,
) -> QuadratureRule:
    """Design an ``n``-node rule exact (to ``eps_target``) on total degree ``r``.

    Restart ``k`` uses the generator seeded with ``seed + k``; the first
    successful restart is returned, so results are reproducible.  Raises
    :class:`InfeasibleRuleError` when every restart fails.

    ``symmetric`` forces (True) or forbids (False) centrally symmetric node
    pairs; the default picks whichever layout leaves more unknowns than
    moment equations.
    """
    family = WeightFamily.parse(family)
    if n < 1:
        raise ValueError("n must be at least 1")
    sys = MomentSystem.total_order(family, d, r, cap=cap)
    layout = _pick_layout(sys, n, symmetric)
    problem = _Problem(sys, layout)
    best = math.inf
    for restart in range(max(1, max_restarts)):
        rng = np.random.default_rng(seed + restart)
        theta0 = layout.init(rng)
        out = levenberg_marquardt(problem, theta0, eps_target, max_iter=max_iter)
        log.debug("restart %d: residual %.3e after %d iterations (%s)", restart, out.residual, out.iterations, out.reason)
        if not np.isfinite(out.residual):
            continue
        best = min(best, out.residual)
        if out.residual <= eps_target:
            rule = _finalize(sys, layout, out.theta, seed, eps_target, restart)
            if rule is not None:
                return rule
    raise InfeasibleRuleError(
        f"no {n}-node rule with residual <= {eps_target:g} for {family.value} d={d} r={r} "
        f"after {max(1, max_restarts)} restarts (best residual {best:.3e})",
        best_residual=best,
        restarts=max(1, max_restarts),
        family=family,
        dim=d,
        order=r,
        n=n,
    )


def min_nodes_search(
    family,
    d: int,
    r: int,
    eps_target: float = DEFAULT_EPS,
    n_lo: int = 1,
    n_hi: int = 200,
    seed: int = 0,
    max_restarts: int = DEFAULT_RESTARTS,
    **kwargs,
) -> int:
    """Smallest ``n`` in ``[n_lo, n_hi]`` for which :func:`generate_dq` succeeds.

    Bisection assumes feasibility is monotone in ``n``; the upper end is
    verified first and the returned value has been generated successfully.
    """
    if n_lo > n_hi:
        raise ValueError("n_lo must not exceed n_hi")

    def feasible(n):
        try:
            generate_dq(family, d, r, n, eps_target, seed, max_restarts, **kwargs)
        except InfeasibleRuleError:
            return False
        return True

    if not feasible(n_hi):
        raise InfeasibleRuleError(
            f"no feasible node count in [{n_lo}, {n_hi}]",
            best_residual=math.nan,
            restarts=max_restarts,
            family=WeightFamily.parse(family),
            dim=d,
            order=r,
            n=n_hi,
        )
    lo, hi = n_lo, n_hi
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid + 1
    return hi


# ---------------------------------------------------------------------------
# rule files


def cache_key(family, d: int, r: int, n: int) -> str:
    return f"{WeightFamily.parse(family).value}-d{d}-r{r}-n{n}"


def resolve_cache_dir(path=None) -> Path:
    """Cache directory from the argument, then the environment, then ``./rules``."""
    if path is not None:
        return Path(path)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else Path("rules")


def save_rule(rule: QuadratureRule, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        f"dim {rule.dim}",
        f"order {rule.order}",
        f"nodes {rule.n}",
        f"family {rule.family.value}",
        f"epsilon {rule.residual!r}",
        f"seed {rule.seed if rule.seed is not None else 'none'}",
        f"provenance {rule.provenance.value}",
        "ordering graded-lex",
    ]
    for q in range(rule.n):
        row = list(rule.nodes[:, q]) + [rule.weights[q]]
        lines.append(" ".join(f"{v:.17g}" for v in row))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


_REQUIRED_HEADERS = ("dim", "order", "nodes", "family", "epsilon", "seed")


def load_rule(path, verify: bool = True) -> QuadratureRule:
    """Read a rule file and re-check positivity, support and the stored residual."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RuleFileError(f"{path}: cannot read rule file ({exc.strerror})") from exc
    header = {}
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0][0].isalpha():
            if len(parts) != 2:
                raise RuleFileError(f"{path}:{lineno}: malformed header line {line!r}")
            header[parts[0]] = parts[1]
            continue
        try:
            rows.append([float(v) for v in parts])
        except ValueError:
            raise RuleFileError(f"{path}:{lineno}: non-numeric node row") from None
    missing = [k for k in _REQUIRED_HEADERS if k not in header]
    if missing:
        raise RuleFileError(f"{path}: missing header field(s) {', '.join(missing)}")
    try:
        d, r, n = int(header["dim"]), int(header["order"]), int(header["nodes"])
        eps = float(header["epsilon"])
        family = WeightFamily.parse(header["family"])
        provenance = Provenance(header.get("provenance", "dq"))
        seed = None if header["seed"] == "none" else int(header["seed"])
    except ValueError as exc:
        raise RuleFileError(f"{path}: bad header value ({exc})") from None
    if len(rows) != n or any(len(row) != d + 1 for row in rows):
        raise RuleFileError(f"{path}: expected {n} rows of {d + 1} numbers")
    data = np.array(rows, dtype=float).reshape(n, d + 1)
    rule = QuadratureRule(
        nodes=data[:, :d].T, weights=data[:, d], family=family, order=r,
        residual=eps, provenance=provenance, seed=seed,
    )
    if verify:
        problems = rule.invariant_violations()
        if problems:
            raise RuleFileError(f"{path}: " + "; ".join(problems))
        if provenance is not Provenance.QMC:
            actual = residual(MomentSystem.total_order(family, d, r), rule.nodes, rule.weights)
            if abs(actual - eps) > LOAD_RESIDUAL_TOL:
                raise RuleFileError(
                    f"{path}: stored epsilon {eps:.3e} disagrees with recomputed residual {actual:.3e}"
                )
    return rule


def cached_rule(family, d, r, n, cache_dir=None, generate: bool = True, **kwargs) -> QuadratureRule:
    """Load ``family-d{d}-r{r}-n{n}`` from the cache, generating and storing it if absent."""
    path = resolve_cache_dir(cache_dir) / cache_key(family, d, r, n)
    if path.exists():
        return load_rule(path)
    if not generate:
        fam = WeightFamily.parse(family).value
        raise FileNotFoundError(
            f"rule {path} not found (cache key {path.name}); generate it with "
            f"`dqmix gen-rule --family {fam} --dim {d} --order {r} --nodes {n} --out {path}`"
        )
    rule = generate_dq(family, d, r, n, **kwargs)
    save_rule(rule, path)
    return rule
