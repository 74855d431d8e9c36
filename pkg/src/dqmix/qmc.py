"""Quasi-Monte Carlo draws: randomized and scrambled Halton, and MLHS.

Draws are produced per individual: ``N`` blocks of ``R`` points in the open
unit cube ``(0, 1)^d``.  :func:`to_normal_rule` maps a block to standard
normal space as an equal-weight :class:`~dqmix.quadrature.QuadratureRule`.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import scipy.special

from .orthopoly import WeightFamily
from .quadrature import Provenance, QuadratureRule

PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97)
HALTON_SKIP = 10
_TINY = 2.0**-53


class Generator(enum.Enum):
    HaltonRandomized = "halton"
    HaltonScrambled = "halton-scrambled"
    MLHS = "mlhs"


@dataclass(frozen=True, eq=False)
class DrawMatrix:
    """Uniform draws of shape ``(N, R, d)``; block ``i`` belongs to individual ``i``."""

    points: np.ndarray
    generator: Generator
    seed: int

    @property
    def n_individuals(self) -> int:
        return self.points.shape[0]

    @property
    def count(self) -> int:
        return self.points.shape[1]

    @property
    def dim(self) -> int:
        return self.points.shape[2]

    def block(self, individual: int) -> np.ndarray:
        return self.points[individual]


def radical_inverse(base: int, k, permutation=None, digits: int | None = None):
    """Digit reversal of ``k`` in ``base`` about the radix point.

    >>> radical_inverse(2, 3)
    0.75

    With a digit ``permutation`` every digit ``a`` is replaced by
    ``permutation[a]``, including the leading zeros of the first ``digits``
    positions (so a permutation that moves zero still gives a finite sum).
    """
    k = np.asarray(k, dtype=np.int64)
    if np.any(k < 0):
        raise ValueError("index must be non-negative")
    if digits is None:
        digits = _digits_for(base)
    out = np.zeros(k.shape)
    rest = k.copy()
    scale = 1.0 / base
    for _ in range(digits):
        rest, digit = np.divmod(rest, base)
        if permutation is not None:
            digit = np.asarray(permutation)[digit]
        out += digit * scale
        scale /= base
        if permutation is None and not np.any(rest):
            break
    return float(out) if out.ndim == 0 else out


def _digits_for(base: int) -> int:
    # enough digits to resolve double precision
    return math.ceil(53 * math.log(2) / math.log(base))


def halton_points(indices, d: int, permutations=None) -> np.ndarray:
    """Halton points for the given sequence indices, shape ``(len(indices), d)``."""
    if d > len(PRIMES):
        raise ValueError(f"Halton draws support at most {len(PRIMES)} dimensions, got {d}")
    indices = np.asarray(indices, dtype=np.int64)
    cols = []
    for j in range(d):
        perm = None if permutations is None else permutations[j]
        cols.append(radical_inverse(PRIMES[j], indices, perm))
    return np.stack(cols, axis=-1)


def _open_unit(x: np.ndarray) -> np.ndarray:
    return np.clip(x, _TINY, 1.0 - _TINY)


def halton_draws(d: int, N: int, R: int, seed: int, scrambled: bool = False, shift=None) -> DrawMatrix:
    """Randomized (or scrambled) Halton draws in consecutive per-individual blocks.

    The first ``HALTON_SKIP`` points are discarded.  Randomization adds one
    uniform shift per dimension modulo 1; scrambling additionally applies one
    random digit permutation per base.  ``shift`` overrides the random shift.
    """
    if d > len(PRIMES):
        raise ValueError(f"Halton draws support at most {len(PRIMES)} dimensions, got {d}")
    rng = np.random.default_rng(seed)
    u = rng.uniform(size=d) if shift is None else np.broadcast_to(np.asarray(shift, dtype=float), (d,))
    perms = [rng.permutation(PRIMES[j]) for j in range(d)] if scrambled else None
    idx = np.arange(HALTON_SKIP + 1, HALTON_SKIP + 1 + N * R)
    pts = np.mod(halton_points(idx, d, perms) + u, 1.0)
    gen = Generator.HaltonScrambled if scrambled else Generator.HaltonRandomized
    return DrawMatrix(_open_unit(pts).reshape(N, R, d), gen, seed)


def mlhs_block(R: int, shifts, permutations) -> np.ndarray:
    """One individual's MLHS block: column ``j`` is ``(perm_j(i) + u_j) / R``."""
    shifts = np.asarray(shifts, dtype=float)
    grid = np.asarray(permutations, dtype=float)  # (d, R)
    return ((grid + shifts[:, None]) / R).T


def mlhs_draws(d: int, N: int, R: int, seed: int) -> DrawMatrix:
    """Modified Latin hypercube draws, redrawn independently for each individual."""
    if R < 1:
        raise ValueError("R must be at least 1")
    rng = np.random.default_rng(seed)
    out = np.empty((N, R, d))
    for i in range(N):
        u = rng.uniform(size=d)
        perms = np.stack([rng.permutation(R) for _ in range(d)])
        out[i] = mlhs_block(R, u, perms)
    return DrawMatrix(_open_unit(out), Generator.MLHS, seed)


def make_draws(method: str, d: int, N: int, R: int, seed: int) -> DrawMatrix:
    gen = Generator(method)
    if gen is Generator.MLHS:
        return mlhs_draws(d, N, R, seed)
    return halton_draws(d, N, R, seed, scrambled=gen is Generator.HaltonScrambled)


def inverse_normal_cdf(u):
    return scipy.special.ndtri(u)


def normal_nodes(draws: DrawMatrix) -> np.ndarray:
    """All blocks mapped to standard normal space, shape ``(N, R, d)``."""
    return inverse_normal_cdf(draws.points)


def to_normal_rule(draws: DrawMatrix, individual: int, order: int = 2) -> QuadratureRule:
    """Equal-weight standard normal rule from one individual's block.

    The stored residual is the measured moment residual on total degree
    ``order``; it describes the draws, it is not a design tolerance.
    """
    from .dqgen import MomentSystem, residual

    nodes = inverse_normal_cdf(draws.block(individual)).T
    weights = np.full(draws.count, 1.0 / draws.count)
    eps = residual(MomentSystem.total_order(WeightFamily.StandardNormal, draws.dim, order), nodes, weights)
    return QuadratureRule(
        nodes=nodes,
        weights=weights,
        family=WeightFamily.StandardNormal,
        order=order,
        residual=eps,
        provenance=Provenance.QMC,
        seed=draws.seed,
        meta={"generator": draws.generator.value, "individual": individual},
    )


def star_discrepancy_1d(x) -> float:
    """Exact star discrepancy of a one-dimensional point set."""
    x = np.sort(np.asarray(x, dtype=float))
    n = x.size
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - x), np.max(x - (i - 1) / n)))
