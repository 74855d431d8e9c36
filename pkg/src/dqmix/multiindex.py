"""Multi-index sets, multivariate orthonormal polynomials and tensor rules."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .orthopoly import WeightFamily, eval_table, gauss_rule_1d
from .quadrature import Provenance, QuadratureRule

DEFAULT_CAP = 10**6


class CapExceededError(ValueError):
    """A set or rule would exceed the configured size cap."""


@dataclass(frozen=True, eq=False)
class MultiIndexSet:
    """Ordered multi-indices, one per row of ``indices`` (shape M x d).

    Row 0 is always the zero index.
    """

    indices: np.ndarray
    order: int | None = None

    def __post_init__(self):
        idx = np.array(self.indices, dtype=np.int64, ndmin=2)
        if idx.size and np.any(idx[0] != 0):
            raise ValueError("the first multi-index must be the zero index")
        idx.setflags(write=False)
        object.__setattr__(self, "indices", idx)

    @property
    def dim(self) -> int:
        return self.indices.shape[1]

    def __len__(self) -> int:
        return self.indices.shape[0]

    def __iter__(self):
        return (tuple(int(v) for v in row) for row in self.indices)

    @property
    def max_degree(self) -> int:
        return int(self.indices.max()) if len(self) else 0

    def is_downward_closed(self) -> bool:
        members = set(self)
        for alpha in members:
            for j, aj in enumerate(alpha):
                if aj > 0 and alpha[:j] + (aj - 1,) + alpha[j + 1:] not in members:
                    return False
        return True


def _graded_lex(d: int, degree: int):
    """Multi-indices with |alpha| == degree, lexicographically descending."""
    if d == 1:
        yield (degree,)
        return
    for first in range(degree, -1, -1):
        for rest in _graded_lex(d - 1, degree - first):
            yield (first,) + rest


def total_order_set(d: int, r: int, cap: int = DEFAULT_CAP) -> MultiIndexSet:
    """All ``alpha`` with ``|alpha| <= r`` in graded lexicographic order.

    >>> total_order_set(2, 2).indices.tolist()
    [[0, 0], [1, 0], [0, 1], [2, 0], [1, 1], [0, 2]]
    """
    if d < 1 or r < 0:
        raise ValueError("need d >= 1 and r >= 0")
    size = math.comb(d + r, r)
    if size > cap:
        raise CapExceededError(f"total-order set (d={d}, r={r}) has {size} elements > cap {cap}")
    rows = [alpha for deg in range(r + 1) for alpha in _graded_lex(d, deg)]
    return MultiIndexSet(np.array(rows, dtype=np.int64).reshape(size, d), order=r)


def eval_multivariate(family: WeightFamily, alpha, x) -> float:
    """``pi_alpha(x)``: product of univariate orthonormal polynomials."""
    alpha = tuple(int(a) for a in alpha)
    x = np.asarray(x, dtype=float)
    if x.shape[0] != len(alpha):
        raise ValueError(f"multi-index has {len(alpha)} components but x has {x.shape[0]}")
    out = np.ones(x.shape[1:])
    for aj, xj in zip(alpha, x):
        out = out * eval_table(family, aj, xj)[aj]
    return float(out) if out.ndim == 0 else out


def tensor_rule(family: WeightFamily, d: int, n_1d: int, cap: int = DEFAULT_CAP) -> QuadratureRule:
    """Cartesian product of the ``n_1d``-point Gaussian rule in ``d`` dimensions."""
    family = WeightFamily.parse(family)
    size = n_1d**d
    if size > cap:
        raise CapExceededError(
            f"tensor rule needs {n_1d}^{d} = {size:,} nodes, more than the cap of {cap:,}"
        )
    g = gauss_rule_1d(family, n_1d)
    nodes = np.array(list(itertools.product(g.nodes, repeat=d))).T.reshape(d, size)
    weights = np.array([math.prod(c) for c in itertools.product(g.weights, repeat=d)])
    from .dqgen import MomentSystem, residual  # noqa: circular at import time

    order = 2 * n_1d - 1
    eps = residual(MomentSystem.total_order(family, d, order, cap=cap), nodes, weights)
    return QuadratureRule(
        nodes=nodes,
        weights=weights,
        family=family,
        order=order,
        residual=eps,
        provenance=Provenance.Tensor,
    )
