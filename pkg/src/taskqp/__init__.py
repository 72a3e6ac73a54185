"""Task-based learning of probabilistic models inside stochastic programs.

The package couples a dense convex-QP interior-point solver with exact
argmin differentiation through the KKT system, so predictive models can be
trained to minimize the realized cost of the decisions they induce rather
than a likelihood or squared-error surrogate.
"""

from taskqp.qp import (
    QuadraticProgram,
    QPSolution,
    ResidualReport,
    SolverOptions,
    SolverStatus,
    kkt_residuals,
    solve_batch,
    solve_qp,
)
from taskqp.argmin_diff import (
    DegenerateSolutionError,
    KktFactorization,
    QPGradients,
    backward,
    factorize_kkt,
    jacobian_dz_dtheta,
)

__version__ = "0.1.0"

__all__ = [
    "QuadraticProgram",
    "QPSolution",
    "ResidualReport",
    "SolverOptions",
    "SolverStatus",
    "kkt_residuals",
    "solve_qp",
    "solve_batch",
    "DegenerateSolutionError",
    "KktFactorization",
    "QPGradients",
    "factorize_kkt",
    "backward",
    "jacobian_dz_dtheta",
    "__version__",
]
