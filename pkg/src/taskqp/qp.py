"""Dense convex quadratic programming via a primal-dual interior-point method.

Canonical form:

    minimize    0.5 z'Qz + c'z
    subject to  Gz <= h        (m inequality rows)
                Az == b        (p equality rows)

The solver is a Mehrotra predictor-corrector method on the reduced
augmented system; every factorization is dense.  Failures are reported
through ``QPSolution.status``, never by raising.
"""

from __future__ import annotations

import enum
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla


@contextmanager
def _quiet_linalg():
    """Numerically degenerate iterates are detected explicitly and reported
    through statuses; the intermediate inf/NaN warnings are expected."""
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", sla.LinAlgWarning)
            yield

__all__ = [
    "SolverStatus",
    "SolverOptions",
    "QuadraticProgram",
    "QPSolution",
    "ResidualReport",
    "kkt_residuals",
    "solve_qp",
    "solve_batch",
]

_SYM_TOL = 1e-10


class SolverStatus(enum.Enum):
    OPTIMAL = "optimal"
    MAX_ITERATIONS = "max_iterations"
    INFEASIBLE = "infeasible"
    NUMERICAL_FAILURE = "numerical_failure"


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-8
    max_iterations: int = 100
    regularization: float = 1e-9

    def __post_init__(self) -> None:
        if not (self.tolerance > 0):
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")
        if self.regularization < 0:
            raise ValueError("regularization must be nonnegative")


def _as_2d(M, n_cols: int, name: str) -> np.ndarray:
    if M is None:
        return np.zeros((0, n_cols))
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[1] != n_cols:
        raise ValueError(f"{name} must have shape (*, {n_cols}), got {M.shape}")
    return M


def _as_1d(v, length: int, name: str) -> np.ndarray:
    if v is None:
        return np.zeros(length)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (length,):
        raise ValueError(f"{name} must have shape ({length},), got {v.shape}")
    return v


@dataclass(frozen=True)
class QuadraticProgram:
    """Problem data; validated and symmetrized on construction."""

    Q: np.ndarray
    c: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self) -> None:
        Q = np.asarray(self.Q, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
            raise ValueError(f"Q must be square, got shape {Q.shape}")
        n = Q.shape[0]
        asym = np.abs(Q - Q.T).max() if n else 0.0
        if asym > _SYM_TOL:
            raise ValueError(f"Q asymmetry {asym:.3e} exceeds {_SYM_TOL:.0e}")
        Q = 0.5 * (Q + Q.T)
        c = _as_1d(self.c, n, "c")
        G = _as_2d(self.G, n, "G")
        h = _as_1d(self.h, G.shape[0], "h")
        A = _as_2d(self.A, n, "A")
        b = _as_1d(self.b, A.shape[0], "b")
        for name, arr in (("Q", Q), ("c", c), ("G", G), ("h", h), ("A", A), ("b", b)):
            if not np.isfinite(arr).all():
                raise ValueError(f"{name} contains non-finite entries")
        # PSD check: shifted Cholesky tolerates round-off on the zero eigenvalues
        if n:
            shift = 1e-8 * (1.0 + np.abs(np.diag(Q)).max())
            try:
                np.linalg.cholesky(Q + shift * np.eye(n))
            except np.linalg.LinAlgError:
                raise ValueError("Q is not positive semidefinite") from None
        p = A.shape[0]
        if p > n:
            raise ValueError(f"more equality rows ({p}) than variables ({n})")
        if p and np.linalg.matrix_rank(A) < p:
            raise ValueError("A does not have full row rank")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.G.shape[0]

    @property
    def p(self) -> int:
        return self.A.shape[0]

    def objective(self, z: np.ndarray) -> float:
        z = np.asarray(z, dtype=np.float64)
        return float(0.5 * z @ self.Q @ z + self.c @ z)


@dataclass(frozen=True)
class QPSolution:
    z: np.ndarray
    lam: np.ndarray
    nu: np.ndarray
    iterations: int
    status: SolverStatus


@dataclass(frozen=True)
class ResidualReport:
    """Max-norm KKT residuals of a candidate primal-dual triple."""

    stationarity: float
    primal_ineq: float
    primal_eq: float
    dual_neg: float
    complementarity: float

    @property
    def max_residual(self) -> float:
        return max(
            self.stationarity,
            self.primal_ineq,
            self.primal_eq,
            self.dual_neg,
            self.complementarity,
        )


def kkt_residuals(qp: QuadraticProgram, sol: QPSolution) -> ResidualReport:
    z, lam, nu = sol.z, sol.lam, sol.nu
    r_stat = qp.Q @ z + qp.c
    if qp.m:
        r_stat = r_stat + qp.G.T @ lam
    if qp.p:
        r_stat = r_stat + qp.A.T @ nu
    stationarity = float(np.abs(r_stat).max()) if qp.n else 0.0
    if qp.m:
        slack = qp.G @ z - qp.h
        primal_ineq = float(np.maximum(slack, 0.0).max())
        dual_neg = float(np.maximum(-lam, 0.0).max())
        comp = float(np.abs(lam * slack).max())
    else:
        primal_ineq = dual_neg = comp = 0.0
    primal_eq = float(np.abs(qp.A @ z - qp.b).max()) if qp.p else 0.0
    return ResidualReport(stationarity, primal_ineq, primal_eq, dual_neg, comp)


def _residual_values(qp, z, lam, nu):
    return kkt_residuals(qp, QPSolution(z, lam, nu, 0, SolverStatus.OPTIMAL))


def _max_step(x: np.ndarray, dx: np.ndarray) -> float:
    """Largest alpha in (0, 1] keeping x + alpha*dx nonnegative."""
    neg = dx < 0
    if not neg.any():
        return 1.0
    return float(min(1.0, (-x[neg] / dx[neg]).min()))


def _try_polish(qp: QuadraticProgram, z, lam, nu, opts: SolverOptions):
    """Resolve the equality system of the apparent active set.

    Near convergence the scaled KKT matrix can become too ill-conditioned for
    the dual residual to reach a tight tolerance even though the active set
    is unambiguous.  Re-solving that active set directly restores full
    accuracy.  The active rows may be linearly dependent (two constraints
    binding with a non-unique multiplier split is generic for piecewise-linear
    costs), so the system is solved through an SVD pseudo-inverse.  Refining
    the incoming iterate keeps corrections orthogonal to the null space and
    so preserves the interior-point method's balanced split; a from-scratch
    minimum-norm solve is kept as a fallback for iterates that have drifted.
    Results are only accepted if every KKT residual actually meets the
    tolerance.
    """
    n, m, p = qp.n, qp.m, qp.p
    slack = qp.h - qp.G @ z
    active = np.flatnonzero(lam > slack)
    a = len(active)
    G_a = qp.G[active]
    K = np.zeros((n + p + a, n + p + a))
    K[:n, :n] = qp.Q
    if p:
        K[:n, n:n + p] = qp.A.T
        K[n:n + p, :n] = qp.A
    if a:
        K[:n, n + p:] = G_a.T
        K[n + p:, :n] = G_a
    rhs = np.concatenate([-qp.c, qp.b, qp.h[active]])
    if not np.isfinite(rhs).all():
        return None
    try:
        with _quiet_linalg():
            U, sig, Vt = np.linalg.svd(K)
    except np.linalg.LinAlgError:
        return None
    keep = sig > sig[0] * 1e-10

    def pinv_apply(r):
        y = U.T @ r
        y[keep] /= sig[keep]
        y[~keep] = 0.0
        return Vt.T @ y

    start = np.concatenate([z, nu, lam[active]])
    candidates = [start if np.isfinite(start).all() else None, None]
    for x0 in candidates:
        x = pinv_apply(rhs) if x0 is None else x0.copy()
        for _ in range(3):
            x = x + pinv_apply(rhs - K @ x)
        if not np.isfinite(x).all():
            continue
        lam_full = np.zeros(m)
        lam_full[active] = x[n + p:]
        cand = QPSolution(x[:n], lam_full, x[n:n + p], 0, SolverStatus.OPTIMAL)
        if kkt_residuals(qp, cand).max_residual < opts.tolerance:
            return cand
    return None


def _solve_equality_qp(qp: QuadraticProgram, opts: SolverOptions) -> QPSolution:
    n, p = qp.n, qp.p
    reg = opts.regularization
    K = np.zeros((n + p, n + p))
    K[:n, :n] = qp.Q + reg * np.eye(n)
    if p:
        K[:n, n:] = qp.A.T
        K[n:, :n] = qp.A
        K[n:, n:] = -reg * np.eye(p)
    rhs = np.concatenate([-qp.c, qp.b])
    try:
        with _quiet_linalg():
            lu = sla.lu_factor(K, check_finite=False)
            x = sla.lu_solve(lu, rhs, check_finite=False)
            # one refinement round recovers what the static regularization perturbed
            for _ in range(2):
                z, nu = x[:n], x[n:]
                r = np.concatenate([qp.Q @ z + qp.c + (qp.A.T @ nu if p else 0.0),
                                    qp.A @ z - qp.b])
                x -= sla.lu_solve(lu, np.concatenate([r[:n], r[n:]]),
                                  check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return QPSolution(np.zeros(n), np.zeros(0), np.zeros(p), 0,
                          SolverStatus.NUMERICAL_FAILURE)
    z, nu = x[:n], x[n:]
    if not np.isfinite(x).all():
        return QPSolution(np.zeros(n), np.zeros(0), np.zeros(p), 0,
                          SolverStatus.NUMERICAL_FAILURE)
    res = _residual_values(qp, z, np.zeros(0), nu)
    status = SolverStatus.OPTIMAL if res.max_residual < opts.tolerance \
        else SolverStatus.NUMERICAL_FAILURE
    return QPSolution(z, np.zeros(0), nu, 1, status)


def solve_qp(qp: QuadraticProgram, options: SolverOptions | None = None) -> QPSolution:
    """Solve the QP; statuses report failure modes instead of raising."""
    opts = options or SolverOptions()
    n, m, p = qp.n, qp.m, qp.p
    if m == 0:
        return _solve_equality_qp(qp, opts)

    Q, c, G, h, A, b = qp.Q, qp.c, qp.G, qp.h, qp.A, qp.b
    GT, AT = G.T, A.T
    reg = opts.regularization
    tol = opts.tolerance

    if p:
        z = np.linalg.lstsq(A, b, rcond=None)[0]
    else:
        z = np.zeros(n)
    s = np.ones(m)
    lam = np.ones(m)
    nu = np.zeros(p)

    Qreg = Q + reg * np.eye(n)
    K = np.zeros((n + p, n + p))
    if p:
        K[:n, n:] = AT
        K[n:, :n] = A
        K[n:, n:] = -reg * np.eye(p)

    def result(status, iters):
        return QPSolution(z.copy(), lam.copy(), nu.copy(), iters, status)

    def polished(iters):
        cand = _try_polish(qp, z, lam, nu, opts)
        if cand is None:
            return None
        return QPSolution(cand.z, cand.lam, cand.nu, iters, cand.status)

    # Divergence is judged relative to the data scale: legitimate multipliers
    # grow with |c| and |h|, so an absolute cap would misreport well-posed
    # problems with large coefficients as infeasible.
    data_scale = max(1.0,
                     np.abs(c).max(initial=0.0),
                     np.abs(h).max(initial=0.0),
                     np.abs(b).max(initial=0.0) if p else 0.0)

    for it in range(opts.max_iterations):
        res = _residual_values(qp, z, lam, nu)
        if res.max_residual < tol:
            return result(SolverStatus.OPTIMAL, it)
        if res.complementarity < tol * 1e-2:
            # complementarity has converged but stationarity is floored by
            # the conditioning of the scaled system: polish the active set
            cand = polished(it)
            if cand is not None:
                return cand
        dual_norm = max(np.abs(lam).max(), np.abs(nu).max() if p else 0.0)
        if dual_norm > 1e10 * data_scale:
            stuck = max(res.primal_ineq, res.primal_eq) > 1e-6 * data_scale
            return result(
                SolverStatus.INFEASIBLE if stuck else SolverStatus.NUMERICAL_FAILURE, it)

        r_dual = Q @ z + c + GT @ lam + (AT @ nu if p else 0.0)
        r_ineq = G @ z + s - h
        r_eq = A @ z - b if p else np.zeros(0)
        comp = s * lam
        mu = comp.mean()

        with _quiet_linalg():
            w = lam / s
            K[:n, :n] = Qreg + (GT * w) @ G
            try:
                lu = sla.lu_factor(K, check_finite=False)
            except (np.linalg.LinAlgError, ValueError):
                return result(SolverStatus.NUMERICAL_FAILURE, it)

            def direction(rcomp):
                rhs_z = -r_dual - GT @ (rcomp / s + w * r_ineq)
                rhs = np.concatenate([rhs_z, -r_eq]) if p else rhs_z
                try:
                    d = sla.lu_solve(lu, rhs, check_finite=False)
                except (np.linalg.LinAlgError, ValueError):
                    return None
                dz = d[:n]
                dnu = d[n:] if p else np.zeros(0)
                ds = -r_ineq - G @ dz
                dlam = (rcomp - lam * ds) / s
                return dz, ds, dlam, dnu

            aff = direction(-comp)
            if aff is None or not all(np.isfinite(v).all() for v in aff):
                return polished(it) or result(SolverStatus.NUMERICAL_FAILURE, it)
            dz_a, ds_a, dlam_a, dnu_a = aff
            alpha_p = _max_step(s, ds_a)
            alpha_d = _max_step(lam, dlam_a)
            mu_aff = ((s + alpha_p * ds_a) @ (lam + alpha_d * dlam_a)) / m
            sigma = (max(mu_aff, 0.0) / mu) ** 3 if mu > 0 else 0.0

            step = direction(-comp - ds_a * dlam_a + sigma * mu)
            if step is None or not all(np.isfinite(v).all() for v in step):
                return polished(it) or result(SolverStatus.NUMERICAL_FAILURE, it)
            dz, ds, dlam, dnu = step
        eta = min(0.9999, max(0.99, 1.0 - 10.0 * mu))
        alpha_p = min(1.0, eta * _max_step(s, ds))
        alpha_d = min(1.0, eta * _max_step(lam, dlam))

        z = z + alpha_p * dz
        s = s + alpha_p * ds
        lam = lam + alpha_d * dlam
        nu = nu + alpha_d * dnu
        if not (np.isfinite(z).all() and np.isfinite(s).all()
                and np.isfinite(lam).all() and (not p or np.isfinite(nu).all())):
            return result(SolverStatus.NUMERICAL_FAILURE, it + 1)

    res = _residual_values(qp, z, lam, nu)
    if res.max_residual < tol:
        return result(SolverStatus.OPTIMAL, opts.max_iterations)
    return (polished(opts.max_iterations)
            or result(SolverStatus.MAX_ITERATIONS, opts.max_iterations))


def solve_batch(qps: list[QuadraticProgram],
                options: SolverOptions | None = None) -> list[QPSolution]:
    """Solve a list of QPs; output order matches input, results are identical
    to calling solve_qp one by one."""
    return [solve_qp(qp, options) for qp in qps]
