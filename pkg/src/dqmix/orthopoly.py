"""Univariate orthonormal polynomials and Gaussian quadrature.

Two weight functions are supported: the standard normal density on the real
line (probabilists' Hermite polynomials) and the uniform density on [0, 1]
(shifted Legendre polynomials).  Both are probability densities, so the
zeroth orthonormal polynomial is identically one.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg


class WeightFamily(enum.Enum):
    """Probability weight function of a univariate polynomial family."""

    StandardNormal = "normal"
    UniformUnit = "uniform"

    @property
    def support(self) -> tuple[float, float]:
        if self is WeightFamily.StandardNormal:
            return (-math.inf, math.inf)
        return (0.0, 1.0)

    def contains(self, x) -> np.ndarray:
        """Elementwise test of membership in the support."""
        lo, hi = self.support
        x = np.asarray(x, dtype=float)
        return np.isfinite(x) & (x >= lo) & (x <= hi)

    @classmethod
    def parse(cls, name: "str | WeightFamily") -> "WeightFamily":
        if isinstance(name, cls):
            return name
        key = str(name).strip().lower()
        aliases = {
            "normal": cls.StandardNormal,
            "standardnormal": cls.StandardNormal,
            "gaussian": cls.StandardNormal,
            "hermite": cls.StandardNormal,
            "uniform": cls.UniformUnit,
            "uniformunit": cls.UniformUnit,
            "legendre": cls.UniformUnit,
        }
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unsupported weight family: {name!r}") from None


@dataclass(frozen=True)
class RecurrenceCoefficients:
    """Coefficients of ``x p_m = sqrt(b_m) p_{m-1} + a_m p_m + sqrt(b_{m+1}) p_{m+1}``.

    ``a[k]`` and ``b[k]`` are stored for ``k = 0..max_degree``; ``b[0]`` is
    the total mass of the weight (one for probability densities).
    """

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        if np.any(self.b <= 0):
            raise ValueError("recurrence coefficients b_k must be strictly positive")


@dataclass(frozen=True)
class UnivariateRule:
    nodes: np.ndarray
    weights: np.ndarray
    order_exact: int

    def integrate(self, f) -> float:
        return float(np.dot(f(self.nodes), self.weights))


def recurrence_coeffs(family: WeightFamily, max_degree: int) -> RecurrenceCoefficients:
    """Closed-form recurrence coefficients ``a_0..a_m`` and ``b_0..b_m``."""
    family = WeightFamily.parse(family)
    if max_degree < 0:
        raise ValueError("max_degree must be non-negative")
    k = np.arange(max_degree + 1, dtype=float)
    if family is WeightFamily.StandardNormal:
        a = np.zeros(max_degree + 1)
        b = k.copy()
    elif family is WeightFamily.UniformUnit:
        a = np.full(max_degree + 1, 0.5)
        with np.errstate(divide="ignore"):
            b = 1.0 / (4.0 * (4.0 - k ** -2.0))
    else:  # pragma: no cover - enum is closed
        raise ValueError(f"unsupported weight family: {family!r}")
    b[0] = 1.0
    return RecurrenceCoefficients(a=a, b=b)


def eval_table(family: WeightFamily, max_degree: int, x, derivative: bool = False):
    """Evaluate ``p_0..p_max_degree`` at every point of ``x``.

    Returns an array of shape ``(max_degree + 1,) + x.shape``.  With
    ``derivative=True`` a second array holding ``p_k'(x)`` is returned too.
    The orthonormal form of the recurrence is used so values stay O(1) at
    high degree.
    """
    coeffs = recurrence_coeffs(family, max(max_degree, 1))
    a, sb = coeffs.a, np.sqrt(coeffs.b)
    x = np.asarray(x, dtype=float)
    p = np.empty((max_degree + 1,) + x.shape)
    p[0] = 1.0 / sb[0]
    if derivative:
        dp = np.zeros_like(p)
    if max_degree >= 1:
        p[1] = (x - a[0]) * p[0] / sb[1]
        if derivative:
            dp[1] = p[0] / sb[1]
    for m in range(1, max_degree):
        p[m + 1] = ((x - a[m]) * p[m] - sb[m] * p[m - 1]) / sb[m + 1]
        if derivative:
            dp[m + 1] = (p[m] + (x - a[m]) * dp[m] - sb[m] * dp[m - 1]) / sb[m + 1]
    if derivative:
        return p, dp
    return p


def eval_orthonormal(family: WeightFamily, degree: int, x):
    """Value of the degree-``degree`` orthonormal polynomial at ``x``."""
    if degree < 0:
        raise ValueError("degree must be non-negative")
    val = eval_table(family, degree, x)[degree]
    return float(val) if np.ndim(val) == 0 else val


def gauss_rule_1d(family: WeightFamily, n: int) -> UnivariateRule:
    """n-point Gaussian rule via the symmetric tridiagonal Jacobi matrix.

    Nodes are the eigenvalues; weights are ``b_0`` times the squared first
    components of the normalized eigenvectors.
    """
    family = WeightFamily.parse(family)
    if n < 1:
        raise ValueError("n must be at least 1")
    coeffs = recurrence_coeffs(family, n - 1)
    diag = coeffs.a[:n]
    off = np.sqrt(coeffs.b[1:n])
    try:
        nodes, vecs = scipy.linalg.eigh_tridiagonal(diag, off)
    except np.linalg.LinAlgError as exc:
        raise RuntimeError(f"Jacobi eigenproblem did not converge for n={n}") from exc
    weights = coeffs.b[0] * vecs[0, :] ** 2
    order = np.argsort(nodes)
    nodes, weights = nodes[order], weights[order]
    if family is WeightFamily.StandardNormal:
        # exact symmetry about the origin
        nodes = 0.5 * (nodes - nodes[::-1])
        weights = 0.5 * (weights + weights[::-1])
    else:
        nodes = 0.5 + 0.5 * ((nodes - 0.5) - (nodes[::-1] - 0.5))
        weights = 0.5 * (weights + weights[::-1])
    return UnivariateRule(nodes=nodes, weights=weights, order_exact=2 * n - 1)


def raw_moment(family: WeightFamily, k: int) -> float:
    """Analytic ``E[X^k]`` under the weight."""
    family = WeightFamily.parse(family)
    if family is WeightFamily.StandardNormal:
        if k % 2:
            return 0.0
        return float(math.prod(range(k - 1, 0, -2))) if k else 1.0
    return 1.0 / (k + 1)
