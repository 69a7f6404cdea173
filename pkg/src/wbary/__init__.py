"""Penalized Wasserstein barycenters with exact transport certificates."""

__version__ = "0.1.0"

from .measures import BoxDomain, DiscreteMeasure, GridDensity, QuantileTable, grid_to_discrete, quantile_table, validate
from .penalties import OUTSIDE_DOMAIN, DomainError, Penalty, bregman_nonsym, bregman_sym
from .solver import (
    BarycenterProblem,
    BarycenterSolution,
    SolverConfig,
    barycenter_1d_exact,
    objective,
    project_simplex,
    solve,
    subgradient,
)
from .transport import TransportCertificate, assignment_distance, c_transform, w2_1d, w2_exact

__all__ = [
    "BarycenterProblem",
    "BarycenterSolution",
    "BoxDomain",
    "DiscreteMeasure",
    "DomainError",
    "GridDensity",
    "OUTSIDE_DOMAIN",
    "Penalty",
    "QuantileTable",
    "SolverConfig",
    "TransportCertificate",
    "assignment_distance",
    "barycenter_1d_exact",
    "bregman_nonsym",
    "bregman_sym",
    "c_transform",
    "grid_to_discrete",
    "objective",
    "project_simplex",
    "quantile_table",
    "solve",
    "subgradient",
    "validate",
    "w2_1d",
    "w2_exact",
]
