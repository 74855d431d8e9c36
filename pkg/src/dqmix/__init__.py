"""Designed quadrature and quasi-Monte Carlo rules for mixed logit estimation."""

__version__ = "0.1.0"
