"""Differentiation of QP minimizers through the KKT optimality system.

At a solution (z, lam, nu) of the canonical QP the implicit function
theorem applied to the stationarity / complementarity / equality residuals
gives a square linear system whose matrix is

    M = [[ Q,          G',          A' ],
         [ diag(lam)G, diag(Gz-h),  0  ],
         [ A,          0,           0  ]].

``backward`` solves the transposed system once per loss and assembles
gradients with respect to all QP data; ``jacobian_dz_dtheta`` solves the
untransposed system for a directional derivative of the data.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from taskqp.qp import QPSolution, QuadraticProgram, SolverStatus

__all__ = [
    "DegenerateSolutionError",
    "KktFactorization",
    "QPGradients",
    "factorize_kkt",
    "backward",
    "jacobian_dz_dtheta",
]

_MARGIN_TOL = 1e-10
_SHIFT = 1e-11


class DegenerateSolutionError(RuntimeError):
    """Raised when the solution violates strict complementarity or the
    differentiation matrix is singular beyond repair."""


@dataclass(frozen=True)
class QPGradients:
    dQ: np.ndarray
    dc: np.ndarray
    dG: np.ndarray
    dh: np.ndarray
    dA: np.ndarray
    db: np.ndarray


@dataclass
class KktFactorization:
    lu: tuple
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    n: int
    m: int
    p: int

    def solve(self, rhs: np.ndarray, transpose: bool = False) -> np.ndarray:
        return sla.lu_solve(self.lu, rhs, trans=1 if transpose else 0,
                            check_finite=False)


def _build_matrix(qp: QuadraticProgram, z, lam) -> np.ndarray:
    n, m, p = qp.n, qp.m, qp.p
    N = n + m + p
    M = np.zeros((N, N))
    M[:n, :n] = qp.Q
    if m:
        M[:n, n:n + m] = qp.G.T
        M[n:n + m, :n] = lam[:, None] * qp.G
        M[n:n + m, n:n + m] = np.diag(qp.G @ z - qp.h)
    if p:
        M[:n, n + m:] = qp.A.T
        M[n + m:, :n] = qp.A
    return M


def _try_factor(M: np.ndarray):
    try:
        # exact singularity is detected below via the U diagonal and handled
        # by the caller; scipy's warning about it is expected noise here
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            lu = sla.lu_factor(M, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return None
    u_diag = np.abs(np.diag(lu[0]))
    scale = max(1.0, np.abs(M).max())
    if u_diag.size and u_diag.min() < 1e-14 * scale:
        return None
    return lu


def factorize_kkt(qp: QuadraticProgram, sol: QPSolution) -> KktFactorization:
    """Factor the differentiation KKT matrix at an optimal solution."""
    if sol.status != SolverStatus.OPTIMAL:
        raise ValueError(f"cannot differentiate a solution with status {sol.status}")
    n, m, p = qp.n, qp.m, qp.p
    z, lam, nu = sol.z, sol.lam, sol.nu
    active = np.zeros(0, dtype=bool)
    if m:
        slack = qp.h - qp.G @ z
        margin = np.maximum(lam, slack).min()
        if margin <= _MARGIN_TOL:
            raise DegenerateSolutionError(
                f"strict complementarity margin {margin:.3e} at or below "
                f"{_MARGIN_TOL:.0e}; active set is ambiguous")
        active = lam > slack
    # constraint qualification: the minimizer is differentiable in the QP
    # data only if the active inequality rows and the equality rows are
    # linearly independent; a dependent set (two constraints binding along
    # the same direction) leaves the multipliers non-unique and the
    # sensitivity system singular.
    rows = [qp.G[active]] if active.any() else []
    if p:
        rows.append(qp.A)
    if rows:
        stacked = np.vstack(rows)
        if stacked.shape[0] > n:
            raise DegenerateSolutionError(
                f"{stacked.shape[0]} active/equality constraint rows in "
                f"{n} variables are necessarily dependent")
        sv = np.linalg.svd(stacked, compute_uv=False)
        if sv[-1] <= sv[0] * 1e-10:
            raise DegenerateSolutionError(
                "active/equality constraint rows are rank deficient "
                f"(smallest/largest singular value ratio "
                f"{sv[-1] / max(sv[0], 1e-300):.3e})")
    M = _build_matrix(qp, z, lam)
    lu = _try_factor(M)
    if lu is None:
        # last resort: tiny opposing diagonal shifts on the primal/dual blocks
        M[np.arange(n), np.arange(n)] += _SHIFT
        M[np.arange(n, n + m + p), np.arange(n, n + m + p)] -= _SHIFT
        lu = _try_factor(M)
    if lu is None:
        raise DegenerateSolutionError("differentiation KKT matrix is singular")
    return KktFactorization(lu=lu, z=z.copy(), lam=lam.copy(), nu=nu.copy(),
                            n=n, m=m, p=p)


def backward(fact: KktFactorization, dL_dz: np.ndarray) -> QPGradients:
    """Gradients of a scalar loss with respect to all QP data, given the
    loss gradient at the minimizer."""
    n, m, p = fact.n, fact.m, fact.p
    dL_dz = np.asarray(dL_dz, dtype=np.float64)
    if dL_dz.shape != (n,):
        raise ValueError(f"dL_dz must have shape ({n},), got {dL_dz.shape}")
    rhs = np.zeros(n + m + p)
    rhs[:n] = -dL_dz
    d = fact.solve(rhs, transpose=True)
    d_z = d[:n]
    d_lam = d[n:n + m]
    d_nu = d[n + m:]
    z, lam, nu = fact.z, fact.lam, fact.nu
    dQ = 0.5 * (np.outer(d_z, z) + np.outer(z, d_z))
    dc = d_z.copy()
    if m:
        dG = np.outer(lam * d_lam, z) + np.outer(lam, d_z)
        dh = -(lam * d_lam)
    else:
        dG = np.zeros((0, n))
        dh = np.zeros(0)
    if p:
        dA = np.outer(d_nu, z) + np.outer(nu, d_z)
        db = -d_nu.copy()
    else:
        dA = np.zeros((0, n))
        db = np.zeros(0)
    return QPGradients(dQ=dQ, dc=dc, dG=dG, dh=dh, dA=dA, db=db)


def jacobian_dz_dtheta(fact: KktFactorization,
                       dQ: np.ndarray | None = None,
                       dc: np.ndarray | None = None,
                       dG: np.ndarray | None = None,
                       dh: np.ndarray | None = None,
                       dA: np.ndarray | None = None,
                       db: np.ndarray | None = None) -> np.ndarray:
    """Directional derivative of the minimizer along a perturbation of the
    QP data (forward mode); absent blocks are treated as zero."""
    n, m, p = fact.n, fact.m, fact.p
    z, lam, nu = fact.z, fact.lam, fact.nu
    r_stat = np.zeros(n)
    if dQ is not None:
        r_stat += np.asarray(dQ, dtype=np.float64) @ z
    if dc is not None:
        r_stat += np.asarray(dc, dtype=np.float64)
    r_comp = np.zeros(m)
    if dG is not None:
        dG = np.asarray(dG, dtype=np.float64)
        r_stat += dG.T @ lam
        r_comp += lam * (dG @ z)
    if dh is not None:
        r_comp -= lam * np.asarray(dh, dtype=np.float64)
    r_eq = np.zeros(p)
    if dA is not None:
        dA = np.asarray(dA, dtype=np.float64)
        r_stat += dA.T @ nu
        r_eq += dA @ z
    if db is not None:
        r_eq -= np.asarray(db, dtype=np.float64)
    rhs = -np.concatenate([r_stat, r_comp, r_eq])
    d = fact.solve(rhs)
    return d[:n]
