"""Spatial+ regression for spatially confounded covariates.

Frequentist and Bayesian fits on a thin-plate regression spline basis, the
simulation scenarios used to study them, and a replication harness.
"""

__version__ = "0.1.0"
