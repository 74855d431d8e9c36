"""BFGS minimization with a strong-Wolfe line search."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.optimize


@dataclass
class MinimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    evaluations: int
    converged: bool
    message: str
    trace: list = field(default_factory=list)


class _Evaluator:
    """Caches the last (x, f, g) so the line search never evaluates a point twice."""

    def __init__(self, fun_and_grad):
        self.fun_and_grad = fun_and_grad
        self.count = 0
        self._key = None
        self._val = None

    def __call__(self, x):
        key = x.tobytes()
        if key != self._key:
            f, g = self.fun_and_grad(x)
            self.count += 1
            self._key, self._val = key, (float(f), np.asarray(g, dtype=float))
        return self._val

    def f(self, x):
        return self(x)[0]

    def g(self, x):
        return self(x)[1]


def bfgs(fun_and_grad, x0, gtol=1e-6, ftol=1e-9, max_iter=500, c1=1e-4, c2=0.9) -> MinimizeResult:
    """Minimize ``f`` given ``fun_and_grad(x) -> (f, grad)``.

    Stops when ``max|grad| < gtol`` or the relative change of ``f`` over an
    accepted step is below ``ftol``.  Every distinct point at which ``f`` is
    evaluated, line-search trials included, counts toward ``evaluations``.
    """
    ev = _Evaluator(fun_and_grad)
    x = np.array(x0, dtype=float)
    f, g = ev(x)
    n = x.size
    H = np.eye(n)
    scaled = False
    f_prev = f + np.linalg.norm(g) / 2.0
    trace = [f]
    if not np.isfinite(f):
        return MinimizeResult(x, f, g, 0, ev.count, False, "non-finite objective at start", trace)
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < gtol:
            return MinimizeResult(x, f, g, it - 1, ev.count, True, "gradient below tolerance", trace)
        p = -H @ g
        if not g @ p < 0:
            H = np.eye(n)
            p = -g
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.optimize.OptimizeWarning)
            warnings.simplefilter("ignore", RuntimeWarning)
            alpha, *_ = scipy.optimize.line_search(
                ev.f, ev.g, x, p, gfk=g, old_fval=f, old_old_fval=f_prev, c1=c1, c2=c2, maxiter=30
            )
        if alpha is None:
            if not np.allclose(H, np.eye(n)):
                # retry along steepest descent before giving up
                H = np.eye(n)
                scaled = False
                continue
            return MinimizeResult(x, f, g, it, ev.count, False, "line search failed", trace)
        s = alpha * p
        x_new = x + s
        f_new, g_new = ev(x_new)
        y = g_new - g
        sy = float(s @ y)
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            if not scaled:
                H = np.eye(n) * (sy / float(y @ y))
                scaled = True
            rho = 1.0 / sy
            Hy = H @ y
            H = H + ((sy + y @ Hy) * rho * rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
        f_prev, f = f, f_new
        x, g = x_new, g_new
        trace.append(f)
        if abs(f_prev - f) <= ftol * max(abs(f), abs(f_prev), 1.0):
            return MinimizeResult(x, f, g, it, ev.count, True, "relative objective change below tolerance", trace)
    return MinimizeResult(x, f, g, max_iter, ev.count, False, "iteration limit", trace)
