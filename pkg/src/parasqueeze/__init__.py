"""Parametric squeezing amplification of a two-mode BEC in a double well."""

__version__ = "0.1.0"
