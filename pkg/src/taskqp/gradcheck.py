"""Central-difference gradient verification.

Every analytic gradient path in the package is checked against the same
finite-difference oracle: central differences with a per-coordinate step
scaled by the coordinate magnitude.  A coordinate passes when its relative
error is below rtol or its absolute error is below atol.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "GradCheckReport",
    "finite_diff",
    "check_gradient",
    "run_scope",
    "SCOPES",
]

DEFAULT_STEP = 1e-5
DEFAULT_RTOL = 1e-4
DEFAULT_ATOL = 1e-7
# full nonlinear re-solves (SQP inside the perturbed function) are noisier
SQP_RTOL = 1e-3
STORAGE_ATOL = 2e-5
# differences of re-solved minimizers carry the solver's residual divided by
# the step; this floor absorbs that noise on coordinates whose true
# derivative vanishes (a genuine gradient bug shows up orders above it)
QP_RESOLVE_ATOL = 5e-7
# central differences are only meaningful where the solution map stays on one
# face for the whole bracket; instances whose weakest complementarity pair
# sits within reach of the step are redrawn
_MIN_ACTIVE_MARGIN = 1e-2
_MAX_REDRAWS = 50


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    worst_index: int
    passed: bool
    step: float


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray,
                step: float = DEFAULT_STEP,
                indices: Sequence[int] | None = None) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    The step for coordinate i is ``step * max(1, |x_i|)``.  When ``indices``
    is given only those coordinates are estimated (others return NaN), which
    keeps checks affordable on large parameter vectors.
    """
    x = np.asarray(x, dtype=np.float64)
    g = np.full(x.size, np.nan)
    flat = x.ravel()
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        hi = step * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xp[i] += hi
        xm = flat.copy()
        xm[i] -= hi
        g[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * hi)
    return g.reshape(x.shape)


def check_gradient(analytic: np.ndarray, numeric: np.ndarray,
                   rtol: float = DEFAULT_RTOL, atol: float = DEFAULT_ATOL,
                   step: float = DEFAULT_STEP) -> GradCheckReport:
    """Compare an analytic gradient against a finite-difference estimate."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if a.shape != n.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {n.shape}")
    mask = np.isfinite(n)
    a, n = a[mask], n[mask]
    if a.size == 0:
        return GradCheckReport(0.0, 0.0, 0, True, step)
    abs_err = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel_err = np.where(denom > 0, abs_err / np.where(denom > 0, denom, 1.0), 0.0)
    # a coordinate fails only if it misses both thresholds
    badness = np.minimum(rel_err / rtol, abs_err / atol)
    worst = int(np.argmax(badness))
    return GradCheckReport(
        max_rel_err=float(rel_err.max()),
        max_abs_err=float(abs_err.max()),
        worst_index=worst,
        passed=bool(badness.max() < 1.0),
        step=step,
    )


def _check_fd(analytic, f, x, rtol=DEFAULT_RTOL, atol=DEFAULT_ATOL,
              step=DEFAULT_STEP, indices=None) -> GradCheckReport:
    numeric = finite_diff(f, x, step=step, indices=indices)
    return check_gradient(analytic, numeric, rtol=rtol, atol=atol, step=step)


# ---------------------------------------------------------------------------
# named suites, used by the CLI `gradcheck` subcommand and the acceptance test


def _suite_qp(seed: int, n_seeds: int):
    from taskqp.qp import (QuadraticProgram, SolverOptions, _try_polish,
                           solve_qp)
    from taskqp.argmin_diff import backward, factorize_kkt, jacobian_dz_dtheta

    out = []
    tight = SolverOptions(tolerance=1e-11)
    polish_opts = SolverOptions(tolerance=1e-13)

    def precise(pert):
        # finite differences of the minimizer divide the solve error by the
        # step, so squeeze each solve to machine accuracy where possible
        s = solve_qp(pert, tight)
        if s.status.value != "optimal":
            return None
        return _try_polish(pert, s.z, s.lam, s.nu, polish_opts) or s

    for k in range(n_seeds):
        rng = np.random.default_rng((seed, 11, k))
        for _ in range(_MAX_REDRAWS):
            n = int(rng.integers(2, 7))
            m = int(rng.integers(1, 9))
            p = int(rng.integers(0, min(3, n - 1) + 1))
            Mx = rng.standard_normal((n, n))
            Q = Mx @ Mx.T / n + 0.3 * np.eye(n)
            c = rng.standard_normal(n)
            zf = rng.standard_normal(n)
            G = rng.standard_normal((m, n))
            h = G @ zf + rng.random(m) + 0.1
            A = rng.standard_normal((p, n)) if p else None
            b = (A @ zf) if p else None
            qp = QuadraticProgram(Q=Q, c=c, G=G, h=h, A=A, b=b)
            sol = precise(qp)
            if (sol is not None
                    and np.maximum(sol.lam, qp.h - qp.G @ sol.z).min()
                    >= _MIN_ACTIVE_MARGIN):
                break
        else:
            continue
        w = rng.standard_normal(n)

        def loss(theta, qp=qp, w=w, n=n, m=m, p=p):
            nq = n * n
            Qp = qp.Q + _sym(theta[:nq].reshape(n, n))
            cp = qp.c + theta[nq:nq + n]
            Gp = qp.G + theta[nq + n:nq + n + m * n].reshape(m, n)
            hp = qp.h + theta[nq + n + m * n:nq + n + m * n + m]
            off = nq + n + m * n + m
            Ap = qp.A + theta[off:off + p * n].reshape(p, n) if p else None
            bp = qp.b + theta[off + p * n:] if p else None
            pert = QuadraticProgram(Q=Qp, c=cp, G=Gp, h=hp, A=Ap, b=bp)
            s = precise(pert)
            return float(w @ s.z)

        fact = factorize_kkt(qp, sol)
        g = backward(fact, w)
        analytic = np.concatenate([
            g.dQ.ravel(), g.dc, g.dG.ravel(), g.dh, g.dA.ravel(), g.db])
        dim = analytic.size
        theta0 = np.zeros(dim)
        # spot-check a subset of coordinates on larger instances
        indices = rng.permutation(dim)[:min(dim, 40)]
        rep = _check_fd(analytic, loss, theta0, indices=indices,
                        atol=QP_RESOLVE_ATOL)
        out.append((f"qp/backward/{k}", rep))

        # forward mode must satisfy the adjoint identity against backward
        direction = rng.standard_normal(dim)
        nq = n * n
        dQ = _sym(direction[:nq].reshape(n, n))
        dz = jacobian_dz_dtheta(
            fact, dQ=dQ, dc=direction[nq:nq + n],
            dG=direction[nq + n:nq + n + m * n].reshape(m, n),
            dh=direction[nq + n + m * n:nq + n + m * n + m],
            dA=direction[nq + n + m * n + m:nq + n + m * n + m + p * n].reshape(p, n) if p else None,
            db=direction[nq + n + m * n + m + p * n:] if p else None)
        lhs = float(w @ dz)
        sym_dir = np.concatenate([
            dQ.ravel(), direction[nq:]])
        rhs = float(analytic @ sym_dir)
        err = abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs))
        out.append((f"qp/adjoint/{k}", GradCheckReport(err, abs(lhs - rhs), 0,
                                                       err < 1e-10, 0.0)))
    return out


def _sym(M):
    return 0.5 * (M + M.T)


def _suite_models(seed: int, n_seeds: int):
    from taskqp import models

    out = []
    for k in range(n_seeds):
        rng = np.random.default_rng((seed, 23, k))
        d_in, d_out, B = 5, 4, 6
        x = rng.standard_normal((B, d_in))
        use_mlp = k % 2 == 1
        if use_mlp:
            model = models.MlpModel(d_in, d_out, hidden=8, seed=k,
                                    softmax_head=(k % 4 == 1), residual=True)
            model.init_residual(np.zeros((d_out, d_in)), np.zeros(d_out))
        else:
            model = models.LinearModel(d_in, d_out, seed=k,
                                       softmax_head=(k % 4 == 0))
        w = rng.standard_normal((B, d_out))
        theta0 = model.get_flat()

        def loss(theta, model=model, x=x, w=w):
            model.set_flat(theta)
            y = model.forward(x, mode="eval")
            return float((w * y).sum())

        model.set_flat(theta0)
        y = model.forward(x, mode="eval")
        grads, _ = model.backward(w)
        analytic = model.flatten_grads(grads)
        indices = rng.permutation(theta0.size)[:min(theta0.size, 60)]
        rep = _check_fd(analytic, loss, theta0, indices=indices)
        model.set_flat(theta0)
        name = "mlp" if use_mlp else "linear"
        out.append((f"models/{name}/{k}", rep))
    return out


def _suite_inventory(seed: int, n_seeds: int):
    from taskqp import inventory
    from taskqp.models import softmax
    from taskqp.qp import SolverOptions, solve_qp
    from taskqp.argmin_diff import DegenerateSolutionError, factorize_kkt

    out = []
    params = inventory.InventoryParams()
    tight = SolverOptions(tolerance=1e-11)
    for k in range(n_seeds):
        rng = np.random.default_rng((seed, 37, k))
        klev = 6
        d = np.linspace(0.0, 5.0, klev)
        for _ in range(_MAX_REDRAWS):
            logits = rng.standard_normal(klev)
            y = int(rng.integers(0, klev))
            prob0 = softmax(logits[None, :])[0]
            qp0 = inventory.build_inventory_qp(
                np.maximum(prob0, inventory.PROB_CLAMP), params, d)
            sol0 = solve_qp(qp0, tight)
            if (sol0.status.value != "optimal"
                    or np.maximum(sol0.lam, qp0.h - qp0.G @ sol0.z).min()
                    < _MIN_ACTIVE_MARGIN):
                continue
            try:
                # orders pinned exactly on a demand level are not
                # differentiable (the analytic path returns the locally
                # constant zero gradient there, which differences of noisy
                # re-solves cannot resolve); draw a smooth instance instead
                factorize_kkt(qp0, sol0)
            except DegenerateSolutionError:
                continue
            break
        else:
            continue

        # perturb pre-softmax logits so the input stays a distribution,
        # exactly as the model head produces it
        def loss(lg, y=y, d=d):
            p = softmax(lg[None, :])[0]
            return inventory.inventory_task_loss(p, float(d[y]), params, d,
                                                 options=tight)

        prob = softmax(logits[None, :])[0]
        dprob = inventory.inventory_task_loss_grad(prob, float(d[y]), params, d,
                                                   options=tight)
        analytic = inventory.softmax_jacobian_vec(prob, dprob)
        rep = _check_fd(analytic, loss, logits, step=1e-6)
        out.append((f"inventory/chain/{k}", rep))
    return out


def _suite_generation(seed: int, n_seeds: int):
    from taskqp import generation

    out = []
    params = generation.GenSchedParams()
    for k in range(n_seeds):
        rng = np.random.default_rng((seed, 53, k))
        T = 6
        for _ in range(_MAX_REDRAWS):
            mu = 1.0 + 0.5 * rng.standard_normal(T)
            sigma2 = (0.2 + 0.3 * rng.random(T)) ** 2
            y = mu + np.sqrt(sigma2) * rng.standard_normal(T)
            res0 = generation.sqp_solve(generation.GaussianForecast(mu, sigma2),
                                        params)
            # a ramp constraint that is weakly active at the converged
            # schedule flips within the finite-difference bracket
            if (np.maximum(res0.sol.lam, res0.qp.h - res0.qp.G @ res0.sol.z)
                    .min() >= _MIN_ACTIVE_MARGIN):
                break
        else:
            continue

        # derivative chain of alpha and its z-derivatives in mu
        z = mu + 0.3 * rng.standard_normal(T)
        analytic = generation.alpha_dmu(z, mu, sigma2, params)

        def asum(m, z=z, sigma2=sigma2):
            return float(generation.alpha(z, m, sigma2, params).sum())

        rep = _check_fd(analytic, asum, mu, step=1e-6)
        out.append((f"generation/alpha_dmu/{k}", rep))

        # full chain: realized cost of the SQP schedule as a function of mu
        def task(m, y=y, sigma2=sigma2):
            res = generation.sqp_solve(generation.GaussianForecast(m, sigma2), params)
            return generation.realized_generation_cost(res.z, y, params)

        analytic = generation.generation_task_loss_grad(mu, sigma2, y, params)
        rep = _check_fd(analytic, task, mu, step=1e-5)
        rep = GradCheckReport(rep.max_rel_err, rep.max_abs_err, rep.worst_index,
                              rep.max_rel_err < SQP_RTOL or rep.passed, rep.step)
        out.append((f"generation/sqp_chain/{k}", rep))
    return out


def _suite_storage(seed: int, n_seeds: int):
    from taskqp import storage
    from taskqp.qp import SolverOptions

    out = []
    tight = SolverOptions(tolerance=1e-13)
    for k in range(n_seeds):
        rng = np.random.default_rng((seed, 71, k))
        T = 6
        params = storage.BatteryParams(lambda_flex=1.0, eps_health=0.5, horizon=T)
        logmu = rng.normal(1.0, 0.4, T)
        y = np.exp(rng.normal(1.0, 0.5, T))

        def task(lm, y=y):
            return storage.storage_task_loss(np.exp(lm), y, params, tight)

        analytic = storage.storage_task_loss_grad_logmu(np.exp(logmu), y,
                                                        params, tight)
        # prices at hours whose rates are pinned have exactly zero true
        # sensitivity; differencing the solver's smooth residual bias there
        # produces phantom values up to ~bias/step, hence the atol floor
        rep = _check_fd(analytic, task, logmu, step=1e-6, atol=STORAGE_ATOL)
        out.append((f"storage/chain/{k}", rep))
    return out


SCOPES = {
    "qp": _suite_qp,
    "models": _suite_models,
    "inventory": _suite_inventory,
    "generation": _suite_generation,
    "storage": _suite_storage,
}


def run_scope(scope: str, seed: int = 0, n_seeds: int = 20,
              corrupt: float = 0.0) -> list[tuple[str, GradCheckReport]]:
    """Run one named suite (or all); ``corrupt`` perturbs every analytic
    result and exists so the failure path of the CLI can be exercised."""
    names = list(SCOPES) if scope == "all" else [scope]
    results: list[tuple[str, GradCheckReport]] = []
    for name in names:
        if name not in SCOPES:
            raise ValueError(f"unknown gradcheck scope {name!r}")
        results.extend(SCOPES[name](seed, n_seeds))
    if corrupt:
        results = [
            (nm, GradCheckReport(r.max_rel_err + corrupt, r.max_abs_err + corrupt,
                                 r.worst_index, False, r.step))
            for nm, r in results
        ]
    return results
