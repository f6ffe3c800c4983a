"""Probabilistic deadline analysis for CPU reservations (CBS) and QoS budget allocation."""

from cbsprob.distributions import (
    PMF,
    cdf,
    dominates,
    pmf_from_beta,
    pmf_from_trace,
    read_pmf,
    resample,
    write_pmf,
)
from cbsprob.qbdp import (
    ChainCoefficients,
    Classification,
    DivergentReservationError,
    QbdpBlocks,
    ReservationParams,
    blocks,
    build_chain,
    classify,
    drift_d1,
    gamma,
    lump,
)
from cbsprob.solvers import (
    Method,
    SolverError,
    SteadyState,
    analytic_bound,
    char_poly,
    companion_solve,
    deadline_probability,
    matrix_geometric_solve,
    solve,
    tail,
)

__all__ = [
    "PMF",
    "cdf",
    "dominates",
    "pmf_from_beta",
    "pmf_from_trace",
    "read_pmf",
    "resample",
    "write_pmf",
    "ChainCoefficients",
    "Classification",
    "DivergentReservationError",
    "QbdpBlocks",
    "ReservationParams",
    "blocks",
    "build_chain",
    "classify",
    "drift_d1",
    "gamma",
    "lump",
    "Method",
    "SolverError",
    "SteadyState",
    "analytic_bound",
    "char_poly",
    "companion_solve",
    "deadline_probability",
    "matrix_geometric_solve",
    "solve",
    "tail",
]
