"""Stochastic Frank-Wolfe over structured norm balls, with one-shot compression.

The hot kernels (Jacobi SVD sweeps, k-support norm) come from a compiled
extension when available and from a pure-Python twin otherwise; ``BACKEND``
names the one in use.
"""
from .errors import *  # noqa: F401,F403
from .kernels import BACKEND
from .numerics import RngStream, SvdFactors, group_norms, ksupport_norm, svd_full, svd_topk, topk_indices
from .regions import FeasibleRegion, Kind, RadiusSpec, ensure_feasible, gauge, lmo, radius_from_diameter

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "FeasibleRegion",
    "Kind",
    "RadiusSpec",
    "RngStream",
    "SvdFactors",
    "ensure_feasible",
    "gauge",
    "group_norms",
    "ksupport_norm",
    "lmo",
    "radius_from_diameter",
    "svd_full",
    "svd_topk",
    "topk_indices",
]
