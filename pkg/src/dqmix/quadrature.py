"""Multivariate quadrature rule container."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .orthopoly import WeightFamily


class Provenance(enum.Enum):
    DQ = "dq"
    Tensor = "tensor"
    QMC = "qmc"


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    """Nodes ``X`` (d x n) and positive weights ``w`` (n,) for a weight family.

    ``residual`` is the moment-matching residual on the total-order space of
    degree ``order``.  For QMC-wrapped rules it is informative only.
    """

    nodes: np.ndarray
    weights: np.ndarray
    family: WeightFamily
    order: int
    residual: float
    provenance: Provenance = Provenance.DQ
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float, ndmin=2)
        weights = np.array(self.weights, dtype=float, ndmin=1)
        if nodes.shape[1] != weights.shape[0]:
            raise ValueError(
                f"nodes have {nodes.shape[1]} columns but {weights.shape[0]} weights were given"
            )
        nodes.setflags(write=False)
        weights.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "family", WeightFamily.parse(self.family))

    @property
    def dim(self) -> int:
        return self.nodes.shape[0]

    @property
    def n(self) -> int:
        return self.nodes.shape[1]

    def invariant_violations(self) -> list[str]:
        """Names of violated rule invariants (empty when the rule is valid)."""
        problems = []
        if not np.all(np.isfinite(self.weights)) or np.any(self.weights <= 0):
            problems.append("weights must be strictly positive")
        if not np.all(self.family.contains(self.nodes)):
            problems.append(f"nodes must lie in the support {self.family.support}")
        return problems

    def integrate(self, f) -> float:
        """Apply the rule to ``f``, which maps a (d, n) array to n values."""
        return float(np.dot(f(self.nodes), self.weights))
